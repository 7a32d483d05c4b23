"""Experiment driver: source training, adaptation sweeps and reports."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, data, metrics
from .cd import CDConfig, SourceStats, cd_adapt, compute_source_stats
from .errors import ConfigurationError, InputError, TrainingError, UsageError
from .nn import BATCH_STATS, RUNNING_STATS, Network, load_checkpoint, save_checkpoint, sgd_step, softmax_temp

logger = logging.getLogger(__name__)

ALGORITHMS = ("none", "cd", "tent", "eta", "t3a")
BYTES_PER_PARAM = 8

# Frozen column order of the row table; downstream plotting relies on it.
ROW_COLUMNS = ("algorithm", "corruption", "intensity", "seed", "accuracy", "ece", "entropy_bits",
               "certainty", "memory_params", "memory_bytes")
METRIC_COLUMNS = ("accuracy", "ece", "entropy_bits", "certainty", "memory_params", "memory_bytes")
VARIANCE_METRICS = ("accuracy", "ece", "entropy_bits")


@dataclass
class ExperimentConfig:
    widths: list = field(default_factory=lambda: [128, 128])
    num_classes: int = 10
    dim: int = 32
    n_train: int = 5000
    n_target: int = 2000
    separation: float = 4.0
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    corruptions: list = field(default_factory=lambda: list(data.CORRUPTIONS))
    intensities: list = field(default_factory=lambda: list(data.INTENSITIES))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    bins: int = 15
    train_epochs: int = 60
    train_lr: float = 0.05
    train_batch_size: int = 64
    cd: CDConfig = field(default_factory=CDConfig)
    baseline_lr: float = 0.05
    baseline_batch_size: int = 64
    eta_epsilon: float = 0.4
    eta_decay: float = 0.9
    t3a_m: int | None = None

    def __post_init__(self):
        if isinstance(self.cd, dict):
            self.cd = CDConfig(**self.cd)
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ConfigurationError(f"unknown algorithms {sorted(unknown)}")
        bad = set(self.corruptions) - set(data.CORRUPTIONS)
        if bad:
            raise ConfigurationError(f"unknown corruptions {sorted(bad)}")
        if any(i not in data.INTENSITIES for i in self.intensities):
            raise ConfigurationError("intensities must lie in 1..5")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.bins < 1 or self.baseline_batch_size < 1 or self.train_batch_size < 1:
            raise ConfigurationError("bins and batch sizes must be >= 1")
        if self.t3a_m is not None and self.t3a_m < 1:
            raise ConfigurationError("t3a_m must be >= 1 or null")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- source training ------------------------------------------------------

def source_dataset(config: ExperimentConfig, seed: int) -> data.LabeledDataset:
    return data.generate_source(config.num_classes, config.dim, config.n_train, seed, config.separation)


def target_dataset(config: ExperimentConfig, seed: int, corruption: str | None, intensity: int):
    spec = None if corruption is None else data.ShiftSpec(corruption, intensity, seed)
    target = data.generate_target(config.num_classes, config.dim, config.n_target, seed, spec, config.separation)
    # stream order for adaptation
    return data.shuffle(target, seed)


def _cross_entropy(logits, labels):
    p = softmax_temp(logits, 1.0)
    n = len(labels)
    loss = -np.mean(np.log(np.clip(p[np.arange(n), labels], metrics.LOG_CLAMP, None)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_network(config: ExperimentConfig, source: data.LabeledDataset, seed: int) -> Network:
    """Minibatch SGD on cross-entropy; BN uses batch statistics while training."""
    net = Network.build(config.dim, config.widths, config.num_classes, seed=seed, bn_mode=BATCH_STATS)
    for epoch in range(config.train_epochs):
        for xb, yb in data.batch_iter(source, config.train_batch_size, seed=[seed, epoch]):
            if xb.shape[0] < 2:
                continue
            logits = net.forward(xb, update_stats=True)
            loss, grad = _cross_entropy(logits, yb)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch} (lr={config.train_lr})")
            sgd_step(net, net.backward(xb, grad), config.train_lr)
    net.bn_mode = RUNNING_STATS
    return net


def train_source(config: ExperimentConfig, seed: int, path=None):
    """Train the backbone for ``seed``; returns ``(network, stats)``.

    With ``path`` the checkpoint (including the source statistics) is written there.
    """
    source = source_dataset(config, seed)
    net = train_network(config, source, seed)
    stats = compute_source_stats(net, source.features)
    if path is not None:
        save_checkpoint(net, path, extra={"h0": stats.h0, "kappa": stats.kappa, "seed": seed})
    return net, stats


def load_source(path):
    if not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    net, extra = load_checkpoint(path)
    if "h0" not in extra or "kappa" not in extra:
        raise UsageError(f"checkpoint {path} carries no source statistics")
    return net, SourceStats(extra["h0"], extra["kappa"])


# -- adapters -------------------------------------------------------------

@dataclass
class Adapted:
    """Adapted model plus per-batch log and the hyperparameters memory accounting needs."""

    model: object
    log: list
    eval_batch_size: int
    info: dict = field(default_factory=dict)


def adapt(algorithm: str, network: Network, stats: SourceStats, observations,
          config: ExperimentConfig) -> Adapted:
    """Run one adaptation pass. ``network`` is modified; pass a fresh copy."""
    bs = config.baseline_batch_size
    if algorithm == "none":
        return Adapted(network, [], bs)
    if algorithm == "cd":
        teacher = network.copy()
        result = cd_adapt(teacher, network, observations, stats, config.cd)
        return Adapted(result.student, result.log, config.cd.batch_size)
    if algorithm == "tent":
        model, log = baselines.tent_adapt(network, observations, config.baseline_lr, bs)
        return Adapted(model, log, bs)
    if algorithm == "eta":
        state = baselines.EtaState.for_classes(network.num_classes, config.eta_epsilon, config.eta_decay)
        model, log = baselines.eta_adapt(network, observations, state, config.baseline_lr, bs)
        return Adapted(model, log, bs)
    if algorithm == "t3a":
        model, log = baselines.t3a_adapt(network, observations, config.t3a_m, bs)
        return Adapted(model, log, bs, {"m": config.t3a_m})
    raise ConfigurationError(f"unknown algorithm {algorithm!r}")


def predict_proba(model, x, batch_size: int) -> np.ndarray:
    """Probabilities batch by batch, so batch-statistics models see the same
    batch sizes they were adapted with."""
    return np.concatenate([model.predict_proba(b) for b in data.split_stream(x, batch_size)])


# -- memory accounting ----------------------------------------------------

def memory_overhead(algorithm: str, network: Network, hyperparams: dict | None = None) -> int:
    """Extra parameters an algorithm keeps beyond the deployed backbone.

    cd: the unfrozen student parameters, ``(1 - beta) * (f + c)`` with the
    realised beta; tent/eta: batch-norm parameters; t3a: ``M * c`` prototypes
    worth of classifier-sized storage, or for unbounded M the stored supports
    times the per-class share of the classifier.
    """
    hyperparams = hyperparams or {}
    if algorithm == "none":
        return 0
    if algorithm == "cd":
        return network.num_params - network.frozen_param_count
    if algorithm in ("tent", "eta"):
        return network.bn_param_count
    if algorithm == "t3a":
        c = network.classifier_param_count
        m = hyperparams.get("m")
        if m is not None:
            return int(m) * c
        total = hyperparams.get("support_total")
        if total is None:
            raise InputError("t3a with unbounded M needs the realised support count")
        return int(total) * (c // network.num_classes)
    raise ConfigurationError(f"unknown algorithm {algorithm!r}")


def cd_memory_formula(feature_params: int, classifier_params: int, beta: float) -> int:
    return round((1.0 - beta) * (feature_params + classifier_params))


def t3a_memory_formula(m: int, classifier_params: int) -> int:
    return m * classifier_params


def _adapted_memory(algorithm: str, adapted: Adapted) -> int:
    if algorithm == "t3a":
        model = adapted.model
        return memory_overhead("t3a", model.network, {"m": adapted.info.get("m"),
                                                      "support_total": model.support.total()})
    return memory_overhead(algorithm, adapted.model)


# -- runs -----------------------------------------------------------------

@dataclass
class RunResult:
    row: dict
    reliability: metrics.ReliabilityBins
    log: list
    wall_time: float


def evaluate(model, x, y, batch_size: int, bins: int):
    probs = predict_proba(model, x, batch_size)
    batch = metrics.PredictionBatch.from_probabilities(probs, y)
    h = metrics.entropy_bits(probs)
    mean_h = float(np.mean(h))
    return {
        "accuracy": metrics.accuracy(batch),
        "ece": metrics.ece(batch, bins),
        "entropy_bits": mean_h,
        # reciprocal of the mean entropy; per-row certainty is unbounded for one-hot rows
        "certainty": 1.0 / mean_h if mean_h > 0 else math.inf,
    }, metrics.reliability_bins(batch, bins)


def run_cell(algorithm: str, source_net: Network, stats: SourceStats, target: data.LabeledDataset,
             config: ExperimentConfig, seed: int) -> RunResult:
    net = source_net.copy()
    start = time.perf_counter()
    adapted = adapt(algorithm, net, stats, target.features, config)
    wall = time.perf_counter() - start
    scores, bins = evaluate(adapted.model, target.features, target.labels, adapted.eval_batch_size, config.bins)
    mem = _adapted_memory(algorithm, adapted)
    row = {"algorithm": algorithm, "corruption": target.corruption, "intensity": target.intensity,
           "seed": seed, **scores, "memory_params": mem, "memory_bytes": mem * BYTES_PER_PARAM}
    return RunResult(row, bins, adapted.log, wall)


def run_adaptation(config: ExperimentConfig, checkpoints: dict | None = None, progress=None) -> list[RunResult]:
    """Every (seed, corruption, intensity, algorithm) cell of the config.

    ``checkpoints`` maps seed -> checkpoint path; seeds without one are trained
    on the fly.
    """
    results = []
    for seed in config.seeds:
        if checkpoints and seed in checkpoints:
            net, stats = load_source(checkpoints[seed])
        else:
            net, stats = train_source(config, seed)
        for corruption in config.corruptions:
            for intensity in config.intensities:
                target = target_dataset(config, seed, corruption, intensity)
                for algorithm in config.algorithms:
                    res = run_cell(algorithm, net, stats, target, config, seed)
                    results.append(res)
                    if progress:
                        progress(res)
    return results


def tradeoff_sweep(config: ExperimentConfig, betas=(0.0, 0.25, 0.5, 0.75, 0.98, 1.0), ms=(1, 5, 10, 50, None),
                   checkpoints: dict | None = None) -> list[dict]:
    """Accuracy/ECE/memory as CD's beta and T3A's M vary, averaged over seeds and domains."""
    out = []
    settings = [("cd", "beta", b) for b in betas] + [("t3a", "m", m) for m in ms]
    per_setting = {s: [] for s in settings}
    for seed in config.seeds:
        if checkpoints and seed in checkpoints:
            net, stats = load_source(checkpoints[seed])
        else:
            net, stats = train_source(config, seed)
        for corruption in config.corruptions:
            for intensity in config.intensities:
                target = target_dataset(config, seed, corruption, intensity)
                for alg, param, value in settings:
                    if alg == "cd":
                        cfg = dataclasses.replace(config, cd=dataclasses.replace(config.cd, beta=value))
                    else:
                        cfg = dataclasses.replace(config, t3a_m=value)
                    per_setting[(alg, param, value)].append(
                        run_cell(alg, net, stats, target, cfg, seed).row)
    for (alg, param, value), rows in per_setting.items():
        agg = aggregate(rows, group_by=("algorithm",))[0]
        out.append({"algorithm": alg, "parameter": param, "value": "inf" if value is None else value,
                    "accuracy": agg["accuracy"], "ece": agg["ece"],
                    "memory_params": agg["memory_params"], "memory_bytes": agg["memory_bytes"]})
    return out


# -- aggregation and reports ----------------------------------------------

def aggregate(rows: list[dict], group_by=("algorithm",)) -> list[dict]:
    """Mean over seeds within each domain (corruption, intensity), then mean and
    population variance across domains within each ``group_by`` group."""
    if not rows:
        raise UsageError("no rows to aggregate")
    group_by = tuple(group_by)
    cells: dict = {}
    for r in rows:
        key = tuple(r[g] for g in group_by)
        dom = (r["corruption"], r["intensity"])
        cells.setdefault(key, {}).setdefault(dom, []).append(r)
    out = []
    for key in sorted(cells, key=_sort_key):
        domains = cells[key]
        dom_means = {m: [float(np.mean([r[m] for r in domains[d]])) for d in sorted(domains, key=_sort_key)]
                     for m in METRIC_COLUMNS}
        rec = dict(zip(group_by, key))
        rec["domains"] = len(domains)
        rec["runs"] = sum(len(v) for v in domains.values())
        for m in METRIC_COLUMNS:
            rec[m] = float(np.mean(dom_means[m]))
        for m in VARIANCE_METRICS:
            rec[f"{m}_var"] = float(np.var(dom_means[m]))
        out.append(rec)
    return out


def sigma2_max(summary: list[dict]) -> dict:
    """Largest domain-to-domain variance per metric over the summary rows."""
    return {m: max(r[f"{m}_var"] for r in summary) for m in VARIANCE_METRICS}


def _sort_key(k):
    k = k if isinstance(k, tuple) else (k,)
    order = {a: i for i, a in enumerate(ALGORITHMS + data.CORRUPTIONS)}
    return tuple((order.get(v, len(order)), str(v)) if isinstance(v, str) else (-1, v) for v in k)


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(records: list[dict], columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in records:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


TRADEOFF_COLUMNS = ("algorithm", "parameter", "value", "accuracy", "ece", "memory_params", "memory_bytes")


def _write_table(records, cols, stem: Path, formats) -> list[Path]:
    written = []
    for fmt in formats:
        path = stem.with_suffix("." + fmt)
        if fmt == "csv":
            path.write_text(_csv(records, cols))
        elif fmt == "json":
            path.write_text(_json([{c: r[c] for c in cols} for r in records]))
        else:
            raise UsageError(f"unknown report format {fmt!r}")
        written.append(path)
    return written


def write_tradeoff(table: list[dict], out_dir, formats=("csv", "json")) -> list[Path]:
    """Write a ``tradeoff_sweep`` table as ``tradeoff.*``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _write_table(table, TRADEOFF_COLUMNS, out_dir / "tradeoff", formats)


def emit_report(rows: list[dict], out_dir, formats=("csv", "json"), group_by=("algorithm",),
                reliability: dict | None = None, tradeoff: list[dict] | None = None) -> list[Path]:
    """Write the row table, aggregate summary, sigma^2_max and optional extras.

    Files: ``rows.*``, ``summary.*``, ``sigma2_max.*``, ``by_intensity.*``,
    ``tradeoff.*`` (if given) and ``reliability/<run>.csv`` (if given).
    Returns the written paths.
    """
    if not rows:
        raise UsageError("no rows to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [{c: r[c] for c in ROW_COLUMNS} for r in rows]
    summary = aggregate(rows, group_by)
    by_intensity = aggregate(rows, ("algorithm", "intensity"))
    s2 = sigma2_max(summary)
    sum_cols = list(group_by) + ["domains", "runs", *METRIC_COLUMNS, *(f"{m}_var" for m in VARIANCE_METRICS)]
    int_cols = ["algorithm", "intensity", "domains", "runs", *METRIC_COLUMNS,
                *(f"{m}_var" for m in VARIANCE_METRICS)]
    tables = {"rows": (rows, list(ROW_COLUMNS)), "summary": (summary, sum_cols),
              "by_intensity": (by_intensity, int_cols), "sigma2_max": ([s2], list(VARIANCE_METRICS))}
    if tradeoff is not None:
        tables["tradeoff"] = (tradeoff, list(TRADEOFF_COLUMNS))
    written = []
    for name, (records, cols) in tables.items():
        written += _write_table(records, cols, out_dir / name, formats)
    if reliability:
        rel_dir = out_dir / "reliability"
        rel_dir.mkdir(exist_ok=True)
        for run_id in sorted(reliability):
            path = rel_dir / f"{run_id}.csv"
            path.write_text(reliability[run_id].to_csv())
            written.append(path)
    return written


def run_id(row: dict) -> str:
    return f"{row['algorithm']}_{row['corruption']}_{row['intensity']}_seed{row['seed']}"
