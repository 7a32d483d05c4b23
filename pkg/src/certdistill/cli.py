"""Command line interface.

    certdistill gen-data      write a synthetic dataset container
    certdistill train-source  train backbones and save checkpoints
    certdistill adapt         one algorithm on one target domain
    certdistill sweep         every algorithm x corruption x intensity x seed
    certdistill report        re-aggregate a rows.json file

Config files are JSON objects with ExperimentConfig keys; command line flags
override them. Failures exit non-zero after printing one JSON line
``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import data, harness
from .cd import CDConfig, adaptation_log_csv
from .errors import CertDistillError, UsageError

log = logging.getLogger("certdistill")

_LIST_FIELDS = {"widths": int, "algorithms": str, "corruptions": str, "intensities": int, "seeds": int}


def _optional_int(s: str):
    return None if s.lower() in ("none", "inf", "null") else int(s)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON experiment config")
    g = p.add_argument_group("experiment overrides")
    for f in dataclasses.fields(harness.ExperimentConfig):
        if f.name == "cd":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name in _LIST_FIELDS:
            g.add_argument(flag, dest=f.name, type=_LIST_FIELDS[f.name], nargs="+")
        elif f.name == "t3a_m":
            g.add_argument(flag, dest=f.name, type=_optional_int, help="'inf' for unbounded")
        else:
            typ = f.type if isinstance(f.type, type) else {"int": int, "float": float}.get(str(f.type), str)
            g.add_argument(flag, dest=f.name, type=typ)
    for f in dataclasses.fields(CDConfig):
        flag = "--cd-" + f.name.replace("_", "-")
        if f.name == "refresh_teacher":
            g.add_argument(flag, dest="cd_" + f.name, action="store_true", default=None)
        elif f.name == "h_max":
            g.add_argument(flag, dest="cd_" + f.name, type=float)
        else:
            typ = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            g.add_argument(flag, dest="cd_" + f.name, type=typ)


def _config_from_args(args) -> harness.ExperimentConfig:
    raw = {}
    if args.config is not None:
        raw = harness.ExperimentConfig.load(args.config).to_dict()
    cd = dict(raw.get("cd", {}))
    for f in dataclasses.fields(harness.ExperimentConfig):
        v = getattr(args, f.name, None)
        if f.name != "cd" and v is not None:
            raw[f.name] = v
    for f in dataclasses.fields(CDConfig):
        v = getattr(args, "cd_" + f.name, None)
        if v is not None:
            cd[f.name] = v
    raw["cd"] = cd
    return harness.ExperimentConfig.from_dict(raw)


def _checkpoint_paths(directory) -> dict:
    if directory is None:
        return {}
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"checkpoint directory {directory} does not exist")
    out = {}
    for p in sorted(directory.glob("source_seed*.npz")):
        out[int(p.stem.removeprefix("source_seed"))] = p
    return out


def cmd_gen_data(args) -> None:
    if args.corruption is None:
        ds = data.generate_source(args.classes, args.dim, args.samples, args.seed, args.separation)
    else:
        spec = data.ShiftSpec(args.corruption, args.intensity, args.seed)
        ds = data.generate_target(args.classes, args.dim, args.samples, args.seed, spec, args.separation)
    data.save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)


def cmd_train_source(args) -> None:
    config = _config_from_args(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in config.seeds:
        path = out / f"source_seed{seed}.npz"
        _, stats = harness.train_source(config, seed, path)
        log.info("seed %d: H0=%.4f bits kappa=%.4f -> %s", seed, stats.h0, stats.kappa, path)


def _write_runs(results, out_dir: Path, logs: bool = True) -> None:
    rel = {harness.run_id(r.row): r.reliability for r in results}
    rows = [r.row for r in results]
    harness.emit_report(rows, out_dir, formats=("csv", "json"), reliability=rel)
    if logs:
        log_dir = out_dir / "logs"
        log_dir.mkdir(exist_ok=True)
        for r in results:
            if r.row["algorithm"] == "cd":
                (log_dir / f"{harness.run_id(r.row)}.csv").write_text(adaptation_log_csv(r.log))
    # Wall time is kept apart so the report files stay reproducible byte for byte.
    with open(out_dir / "timings.csv", "w") as fh:
        fh.write("run,wall_time_s\n")
        for r in results:
            fh.write(f"{harness.run_id(r.row)},{r.wall_time:.6f}\n")


def cmd_adapt(args) -> None:
    config = _config_from_args(args)
    seed = config.seeds[0]
    net, stats = harness.load_source(args.checkpoint)
    if args.data is not None:
        target = data.load_dataset(args.data)
    else:
        target = harness.target_dataset(config, seed, args.corruption, args.intensity)
    results = [harness.run_cell(alg, net, stats, target, config, seed) for alg in config.algorithms]
    out = Path(args.out_dir)
    _write_runs(results, out)
    for r in results:
        print(json.dumps({k: r.row[k] for k in harness.ROW_COLUMNS}))


def cmd_sweep(args) -> None:
    config = _config_from_args(args)
    checkpoints = _checkpoint_paths(args.checkpoint_dir)
    out = Path(args.out_dir)

    def progress(res):
        log.debug("%s acc=%.4f ece=%.4f", harness.run_id(res.row), res.row["accuracy"], res.row["ece"])

    results = harness.run_adaptation(config, checkpoints, progress)
    _write_runs(results, out)
    if args.tradeoff:
        trade = harness.tradeoff_sweep(config, checkpoints=checkpoints)
        harness.write_tradeoff(trade, out)
    for rec in harness.aggregate([r.row for r in results]):
        log.info("%-5s acc=%.4f ece=%.4f entropy=%.4f", rec["algorithm"], rec["accuracy"], rec["ece"],
                 rec["entropy_bits"])


def cmd_report(args) -> None:
    try:
        rows = json.loads(Path(args.rows).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read rows file {args.rows}: {exc}") from exc
    harness.emit_report(rows, args.out_dir, formats=tuple(args.format), group_by=tuple(args.group_by))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset container")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--samples", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--corruption", choices=data.CORRUPTIONS)
    p.add_argument("--intensity", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="train one backbone per seed")
    _add_config_flags(p)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="adapt a checkpoint to one target domain")
    _add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, help="dataset container; default is a synthetic target")
    p.add_argument("--corruption", choices=data.CORRUPTIONS, default="gaussian_noise")
    p.add_argument("--intensity", type=int, default=5)
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("sweep", help="full algorithm x domain x seed sweep")
    _add_config_flags(p)
    p.add_argument("--checkpoint-dir", type=Path, help="reuse source_seed<N>.npz checkpoints")
    p.add_argument("--tradeoff", action="store_true", help="also emit the beta / M trade-off table")
    p.add_argument("--out-dir", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate an existing rows.json")
    p.add_argument("--rows", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--format", nargs="+", choices=("csv", "json"), default=["csv", "json"])
    p.add_argument("--group-by", nargs="+", default=["algorithm"],
                   choices=("algorithm", "corruption", "intensity", "seed"))
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (CertDistillError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
