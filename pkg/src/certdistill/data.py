"""Synthetic source/target datasets and the on-disk dataset container.

Source data are Gaussian class clusters (unit covariance) whose means sit on a
regular simplex. Targets are fresh draws from the same distribution pushed
through one of four corruptions at intensity 1..5.

Container layout (little endian, version 1)::

    magic      4 bytes  b"CDDS"
    version    u16
    n          u64      samples
    d          u32      feature dim
    c          u32      classes
    intensity  u8
    tag_len    u16, then tag_len bytes UTF-8 domain tag
    kind_len   u16, then kind_len bytes UTF-8 corruption kind
    features   n*d float64, row-major
    labels     n int64
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import FormatError, ParameterError

CORRUPTIONS = ("gaussian_noise", "feature_scale", "rotation", "mean_shift")
INTENSITIES = (1, 2, 3, 4, 5)

MAGIC = b"CDDS"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain: str = "source"
    corruption: str = "none"
    intensity: int = 0

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ParameterError("features must be a non-empty (N, d) matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise ParameterError("labels must have one entry per sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ParameterError("label out of range")
        if self.intensity == 0 and self.corruption != "none":
            raise ParameterError("intensity 0 requires corruption 'none'")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.domain == other.domain
                and self.corruption == other.corruption and self.intensity == other.intensity
                and self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class ShiftSpec:
    kind: str
    intensity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if self.intensity not in INTENSITIES:
            raise ParameterError(f"intensity must be in 1..5, got {self.intensity}")


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Simplex vertices in the first ``num_classes`` coordinates, pairwise ``separation`` apart."""
    if num_classes < 2 or dim < 2:
        raise ParameterError("need at least 2 classes and 2 dimensions")
    if dim < num_classes:
        raise ParameterError(f"dim ({dim}) must be >= number of classes ({num_classes})")
    means = np.zeros((num_classes, dim))
    means[:, :num_classes] = np.eye(num_classes) - 1.0 / num_classes
    return means * (separation / np.sqrt(2.0))


def _draw(num_classes, dim, samples, rng, separation, domain):
    if samples < num_classes:
        raise ParameterError("need at least one sample per class")
    means = class_means(num_classes, dim, separation)
    labels = rng.permutation(np.arange(samples) % num_classes).astype(np.int64)
    features = means[labels] + rng.standard_normal((samples, dim))
    return LabeledDataset(features, labels, num_classes, domain)


def generate_source(num_classes: int, dim: int, samples: int, seed: int,
                    separation: float = 4.0) -> LabeledDataset:
    return _draw(num_classes, dim, samples, np.random.default_rng(seed), separation, "source")


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def apply_corruption(data: LabeledDataset, spec: ShiftSpec) -> LabeledDataset:
    """Corrupt the features of ``data``; labels and sample count are kept.

    Magnitudes grow linearly with intensity: noise std 0.2*i; contrast factor
    s = 1 - 0.15*i with fresh noise of std sqrt(1 - s**2) topping the variance
    back up (signal shrinks, sensor noise does not); rotation by 18*i degrees
    in a random 2-D plane; mean shift of length 0.5*i along a random
    direction. Random draws derive from ``spec.seed``.
    """
    x = data.features
    i = spec.intensity
    rng = np.random.default_rng([spec.seed, CORRUPTIONS.index(spec.kind), i])
    if spec.kind == "gaussian_noise":
        out = x + rng.standard_normal(x.shape) * (0.2 * i)
    elif spec.kind == "feature_scale":
        s = 1.0 - 0.15 * i
        out = s * x + np.sqrt(1.0 - s * s) * rng.standard_normal(x.shape)
    elif spec.kind == "rotation":
        direction_rng = np.random.default_rng([spec.seed, 2])
        q, _ = np.linalg.qr(direction_rng.standard_normal((data.dim, 2)))
        a, b = q[:, 0], q[:, 1]
        theta = np.deg2rad(18.0 * i)
        pa, pb = x @ a, x @ b
        ra = np.cos(theta) * pa - np.sin(theta) * pb
        rb = np.sin(theta) * pa + np.cos(theta) * pb
        out = x + np.outer(ra - pa, a) + np.outer(rb - pb, b)
    else:
        direction = _unit(np.random.default_rng([spec.seed, 3]), data.dim)
        out = x + 0.5 * i * direction
    return replace(data, features=out, domain="target", corruption=spec.kind, intensity=i)


def generate_target(num_classes: int, dim: int, samples: int, seed: int, spec: ShiftSpec | None,
                    separation: float = 4.0) -> LabeledDataset:
    """Fresh draws from the source distribution (a seed stream disjoint from
    ``generate_source``), corrupted by ``spec`` unless it is None."""
    clean = _draw(num_classes, dim, samples, np.random.default_rng([seed, 1]), separation, "target")
    return clean if spec is None else apply_corruption(clean, spec)


def batch_iter(data: LabeledDataset, batch_size: int, seed: int):
    """Seeded shuffle, then consecutive ``(features, labels)`` batches; the
    final partial batch is included."""
    if batch_size < 1:
        raise ParameterError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(data))
    for start in range(0, len(data), batch_size):
        idx = order[start:start + batch_size]
        yield data.features[idx], data.labels[idx]


def shuffle(data: LabeledDataset, seed: int) -> LabeledDataset:
    order = np.random.default_rng(seed).permutation(len(data))
    return replace(data, features=data.features[order], labels=data.labels[order])


def split_stream(x, size: int) -> list[np.ndarray]:
    """Consecutive batches of ``size`` rows. A trailing single row is merged
    into the previous batch so every batch can feed batch statistics."""
    n = x.shape[0]
    starts = list(range(0, n, size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    bounds = starts[1:] + [n]
    return [x[a:b] for a, b in zip(starts, bounds)]


# -- container -----------------------------------------------------------

_HEAD = struct.Struct("<4sHQIIB")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def save_dataset(data: LabeledDataset, path) -> None:
    n, d = data.features.shape
    blob = bytearray(_HEAD.pack(MAGIC, FORMAT_VERSION, n, d, data.num_classes, data.intensity))
    blob += _pack_str(data.domain) + _pack_str(data.corruption)
    blob += np.ascontiguousarray(data.features, dtype="<f8").tobytes()
    blob += np.ascontiguousarray(data.labels, dtype="<i8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def _read_str(buf: bytes, pos: int, what: str):
    if pos + 2 > len(buf):
        raise FormatError(f"truncated {what} length", pos)
    (k,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    if pos + k > len(buf):
        raise FormatError(f"truncated {what}", pos)
    try:
        return buf[pos:pos + k].decode("utf-8"), pos + k
    except UnicodeDecodeError as exc:
        raise FormatError(f"{what} is not valid UTF-8", pos) from exc


def load_dataset(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEAD.size:
        raise FormatError("truncated header", len(buf))
    magic, version, n, d, c, intensity = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError("bad magic", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if n == 0 or d == 0 or c < 2:
        raise FormatError(f"invalid header dimensions n={n} d={d} c={c}", 6)
    pos = _HEAD.size
    domain, pos = _read_str(buf, pos, "domain tag")
    corruption, pos = _read_str(buf, pos, "corruption kind")
    expected = pos + n * d * 8 + n * 8
    if len(buf) != expected:
        raise FormatError(f"body length mismatch: header implies {expected} bytes, file has {len(buf)}",
                          min(len(buf), expected))
    features = np.frombuffer(buf, dtype="<f8", count=n * d, offset=pos).reshape(n, d).astype(np.float64)
    labels = np.frombuffer(buf, dtype="<i8", count=n, offset=pos + n * d * 8).astype(np.int64)
    try:
        return LabeledDataset(features, labels, int(c), domain, corruption, int(intensity))
    except ParameterError as exc:
        raise FormatError(f"invalid dataset contents: {exc}", pos) from exc
