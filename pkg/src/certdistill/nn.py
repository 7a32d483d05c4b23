"""Small differentiable network built on numpy.

Layers are plain objects holding their parameters in dicts. A ``Network`` runs
them in order, caches what the backward pass needs, and exposes a per-layer
freeze mask. Everything runs in float64.

Gradients are represented as a list aligned with ``network.layers``; each entry
is a dict mapping parameter name to an array of the parameter's shape (empty
for parameterless layers).
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DegenerateBatchError, FormatError, ParameterError, ShapeError, UsageError

RUNNING_STATS = "running_stats"
BATCH_STATS = "batch_stats"
BN_MODES = (RUNNING_STATS, BATCH_STATS)

CHECKPOINT_VERSION = 1

Gradients = list  # list[dict[str, np.ndarray]]


class Dense:
    kind = "dense"

    def __init__(self, input_dim: int, output_dim: int, rng: np.random.Generator | None = None):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        if rng is None:
            weight = np.zeros((self.input_dim, self.output_dim))
        else:
            # He initialisation, suited to the ReLU blocks that follow.
            weight = rng.normal(0.0, np.sqrt(2.0 / self.input_dim), (self.input_dim, self.output_dim))
        self.params = {"weight": weight, "bias": np.zeros(self.output_dim)}
        self.buffers: dict[str, np.ndarray] = {}

    @property
    def param_count(self) -> int:
        return self.input_dim * self.output_dim + self.output_dim

    def forward(self, x, bn_mode, update_stats):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, dy, cache):
        x = cache
        grads = {"weight": x.T @ dy, "bias": dy.sum(axis=0)}
        return dy @ self.params["weight"].T, grads


class BatchNorm:
    kind = "batch_norm"

    def __init__(self, dim: int, eps: float = 1e-8, momentum: float = 0.1):
        self.input_dim = self.output_dim = int(dim)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params = {"scale": np.ones(self.input_dim), "shift": np.zeros(self.input_dim)}
        self.buffers = {"running_mean": np.zeros(self.input_dim), "running_var": np.ones(self.input_dim)}

    @property
    def param_count(self) -> int:
        return 2 * self.input_dim

    def forward(self, x, bn_mode, update_stats):
        if bn_mode == BATCH_STATS:
            n = x.shape[0]
            if n < 2:
                raise DegenerateBatchError("batch statistics need at least 2 samples, got %d" % n)
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if update_stats:
                m = self.momentum
                self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
                self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * var * n / (n - 1)
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        y = xhat * self.params["scale"] + self.params["shift"]
        return y, (xhat, inv_std, bn_mode)

    def backward(self, dy, cache):
        xhat, inv_std, bn_mode = cache
        grads = {"scale": (dy * xhat).sum(axis=0), "shift": dy.sum(axis=0)}
        dxhat = dy * self.params["scale"]
        if bn_mode == BATCH_STATS:
            n = dy.shape[0]
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, grads


class ReLU:
    kind = "relu"
    param_count = 0

    def __init__(self, dim: int):
        self.input_dim = self.output_dim = int(dim)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x, bn_mode, update_stats):
        mask = x > 0
        return x * mask, mask

    def backward(self, dy, cache):
        return dy * cache, {}


LAYER_TYPES = {cls.kind: cls for cls in (Dense, BatchNorm, ReLU)}


def softmax_temp(logits, T: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``logits / T`` with max subtraction.

    ``T`` may be a scalar or an array broadcastable against ``logits``
    (e.g. shape ``(n, 1)`` for one temperature per row).
    """
    if not np.all(np.asarray(T) > 0):
        raise ParameterError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    if z.shape[-1] < 2:
        raise ShapeError("softmax needs at least 2 classes")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Network:
    """Ordered stack of layers with a freeze mask and batch-norm mode.

    The last layer must be a ``Dense`` layer; it is the classifier, everything
    before it is the feature extractor.
    """

    def __init__(self, layers, bn_mode: str = RUNNING_STATS, inference_temperature: float = 1.0):
        if not layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(layers[:-1], layers[1:]):
            if prev.output_dim != nxt.input_dim:
                raise ShapeError(f"layer dims do not chain: {prev.output_dim} -> {nxt.input_dim}")
        if bn_mode not in BN_MODES:
            raise ParameterError(f"unknown bn_mode {bn_mode!r}")
        if not inference_temperature > 0:
            raise ParameterError("inference_temperature must be positive")
        self.layers = list(layers)
        self.freeze_mask = [False] * len(self.layers)
        self.bn_mode = bn_mode
        self.inference_temperature = float(inference_temperature)
        self.beta = 0.0
        self._cache = None

    @classmethod
    def build(cls, input_dim: int, widths, num_classes: int, seed: int = 0, **kwargs) -> "Network":
        """dense -> batch_norm -> relu for each width, then a dense classifier."""
        rng = np.random.default_rng(seed)
        layers = []
        d = input_dim
        for w in widths:
            layers += [Dense(d, w, rng), BatchNorm(w), ReLU(w)]
            d = w
        layers.append(Dense(d, num_classes, rng))
        return cls(layers, **kwargs)

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].output_dim

    @property
    def classifier(self) -> Dense:
        return self.layers[-1]

    def layer_param_counts(self) -> list[int]:
        return [layer.param_count for layer in self.layers]

    @property
    def num_params(self) -> int:
        return sum(self.layer_param_counts())

    @property
    def classifier_param_count(self) -> int:
        return self.classifier.param_count

    @property
    def feature_param_count(self) -> int:
        return self.num_params - self.classifier_param_count

    @property
    def bn_param_count(self) -> int:
        return sum(l.param_count for l in self.layers if l.kind == BatchNorm.kind)

    @property
    def frozen_param_count(self) -> int:
        return sum(l.param_count for l, f in zip(self.layers, self.freeze_mask) if f)

    def copy(self) -> "Network":
        clone = copy.deepcopy(self)
        clone._cache = None
        return clone

    def checksum(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for name in sorted(store):
                    h.update(name.encode())
                    h.update(np.ascontiguousarray(store[name]).tobytes())
        return h.hexdigest()

    # -- computation ---------------------------------------------------

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected batch of shape (n, {self.input_dim}), got {x.shape}")
        return x

    def forward(self, x, update_stats: bool = False, return_features: bool = False):
        x = self._check_batch(x)
        caches = []
        h = x
        features = None
        for i, layer in enumerate(self.layers):
            if i == len(self.layers) - 1:
                features = h
            h, cache = layer.forward(h, self.bn_mode, update_stats)
            caches.append(cache)
        self._cache = (x, caches)
        if return_features:
            return h, features
        return h

    __call__ = forward

    def features(self, x) -> np.ndarray:
        """Output of the feature extractor (all layers before the classifier)."""
        return self.forward(x, return_features=True)[1]

    def predict_proba(self, x) -> np.ndarray:
        return softmax_temp(self.forward(x), self.inference_temperature)

    def predict(self, x) -> np.ndarray:
        return self.forward(x).argmax(axis=1)

    def backward(self, x, dlogits) -> Gradients:
        """Gradients of a loss whose gradient at the logits is ``dlogits``.

        Must follow a ``forward`` on the same batch. Frozen layers get zero
        gradients but still pass the signal to the layers before them.
        """
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        cached_x, caches = self._cache
        x = np.asarray(x, dtype=np.float64)
        if x.shape != cached_x.shape or not np.array_equal(x, cached_x):
            raise UsageError("backward batch does not match the cached forward pass")
        dy = np.asarray(dlogits, dtype=np.float64)
        if dy.shape != (x.shape[0], self.num_classes):
            raise ShapeError(f"loss gradient shape {dy.shape} does not match logits")
        grads: Gradients = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dy, g = self.layers[i].backward(dy, caches[i])
            if self.freeze_mask[i]:
                g = {k: np.zeros_like(v) for k, v in g.items()}
            grads[i] = g
        return grads

    def zero_grads(self) -> Gradients:
        return [{k: np.zeros_like(v) for k, v in l.params.items()} for l in self.layers]


def forward(network: Network, batch) -> np.ndarray:
    return network.forward(batch)


def backward(network: Network, batch, loss_grad_at_logits) -> Gradients:
    return network.backward(batch, loss_grad_at_logits)


def sgd_step(network: Network, grads: Gradients, lr: float) -> Network:
    """In-place ``theta -= lr * grad`` on unfrozen layers. Returns ``network``."""
    if len(grads) != len(network.layers):
        raise ShapeError("gradients do not match network layers")
    for layer, g, frozen in zip(network.layers, grads, network.freeze_mask):
        if set(g) != set(layer.params):
            raise ShapeError(f"gradient keys {sorted(g)} do not match {layer.kind} parameters")
        for name, value in g.items():
            if value.shape != layer.params[name].shape:
                raise ShapeError(f"gradient for {layer.kind}.{name} has shape {value.shape}")
        if frozen or lr == 0:
            continue
        for name, value in g.items():
            layer.params[name] = layer.params[name] - lr * value
    return network


def freeze_b_layers(network: Network, beta: float) -> float:
    """Freeze whole layers from the output end until at least ``beta`` of the
    parameters are frozen. Returns the realised frozen fraction."""
    if not 0.0 <= beta <= 1.0:
        raise ParameterError(f"beta must lie in [0, 1], got {beta}")
    total = network.num_params
    target = beta * total
    mask = [False] * len(network.layers)
    frozen = 0
    for i in range(len(network.layers) - 1, -1, -1):
        if frozen >= target:
            break
        mask[i] = True
        frozen += network.layers[i].param_count
    network.freeze_mask = mask
    network.beta = frozen / total if total else 0.0
    return network.beta


def temperature_scale(network: Network, T: float) -> Network:
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")
    network.inference_temperature = float(T)
    return network


# -- checkpoints ---------------------------------------------------------
#
# A checkpoint is a numpy .npz archive (uncompressed zip of .npy entries). The entry "meta" holds UTF-8 JSON
# (format version, layer specs, freeze mask, bn_mode, inference temperature,
# recorded beta and any caller-supplied extras); every parameter and buffer
# is stored as "layer<i>.<name>" in float64.


def save_checkpoint(network: Network, path, extra: dict | None = None) -> None:
    layers = []
    arrays = {}
    for i, layer in enumerate(network.layers):
        spec = {"kind": layer.kind, "input_dim": layer.input_dim, "output_dim": layer.output_dim}
        if layer.kind == BatchNorm.kind:
            spec.update(eps=layer.eps, momentum=layer.momentum)
        layers.append(spec)
        for store in (layer.params, layer.buffers):
            for name, value in store.items():
                arrays[f"layer{i}.{name}"] = value
    meta = {
        "format": "certdistill-checkpoint",
        "version": CHECKPOINT_VERSION,
        "layers": layers,
        "freeze_mask": network.freeze_mask,
        "bn_mode": network.bn_mode,
        "inference_temperature": network.inference_temperature,
        "beta": network.beta,
        "extra": extra or {},
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    # Fixed entry timestamps keep identical networks byte-identical on disk.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[Network, dict]:
    """Returns ``(network, extra)``."""
    path = Path(path)
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        if "meta" not in archive:
            raise FormatError(f"{path} has no metadata entry")
        meta = json.loads(archive["meta"].tobytes().decode("utf-8"))
        if meta.get("format") != "certdistill-checkpoint":
            raise FormatError(f"{path} is not a checkpoint")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
        layers = []
        for i, spec in enumerate(meta["layers"]):
            kind = spec["kind"]
            if kind == Dense.kind:
                layer = Dense(spec["input_dim"], spec["output_dim"])
            elif kind == BatchNorm.kind:
                layer = BatchNorm(spec["input_dim"], eps=spec["eps"], momentum=spec["momentum"])
            elif kind == ReLU.kind:
                layer = ReLU(spec["input_dim"])
            else:
                raise FormatError(f"unknown layer kind {kind!r}")
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"layer{i}.{name}"
                    if key not in archive:
                        raise FormatError(f"checkpoint missing {key}")
                    value = archive[key]
                    if value.shape != store[name].shape:
                        raise FormatError(f"{key} has shape {value.shape}")
                    store[name] = value.astype(np.float64, copy=False)
            layers.append(layer)
    net = Network(layers, bn_mode=meta["bn_mode"], inference_temperature=meta["inference_temperature"])
    net.freeze_mask = [bool(f) for f in meta["freeze_mask"]]
    net.beta = meta["beta"]
    return net, meta["extra"]
