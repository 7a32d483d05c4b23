"""Comparison adapters: TENT, ETA and T3A.

TENT and ETA take one SGD step per batch on the batch-norm scale/shift
parameters, minimising (weighted) prediction entropy with batch statistics.
T3A never back-propagates; it keeps per-class prototype sets of feature
vectors and classifies by inner products with their centroids.

The ETA sample weight and the T3A prototype seeding are reconstructions of
the commonly used forms; see ``eta_weight`` and ``SupportSet.from_classifier``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import split_stream as _batches
from .errors import ConfigurationError, ParameterError, ShapeError
from .nn import BATCH_STATS, BatchNorm, Network, sgd_step, softmax_temp


def tent_loss(p):
    """Shannon entropy in nats (row-wise for 2-D input)."""
    return metrics.entropy_nats(p)


def entropy_grad_logits(logits, weights=None) -> np.ndarray:
    """Gradient of ``sum_i w_i * H(softmax(z_i))`` w.r.t. the logits ``z``.

    H in nats; ``weights`` default to ones.
    """
    p = softmax_temp(logits, 1.0)
    logp = np.log(np.clip(p, metrics.LOG_CLAMP, None))
    h = -(p * logp).sum(axis=1, keepdims=True)
    g = -p * (logp + h)
    if weights is not None:
        g = g * np.asarray(weights, dtype=np.float64)[:, None]
    return g


def _bn_only(network: Network) -> None:
    if not any(l.kind == BatchNorm.kind for l in network.layers):
        raise ConfigurationError("network has no batch-norm layers to adapt")
    network.freeze_mask = [l.kind != BatchNorm.kind for l in network.layers]
    network.bn_mode = BATCH_STATS


@dataclass
class EntropyLog:
    batch: int
    entropy_before: float  # bits
    accepted: int


def tent_step(network: Network, batch, lr: float) -> EntropyLog:
    logits = network.forward(batch)
    n = logits.shape[0]
    probs = softmax_temp(logits, 1.0)
    if lr > 0:
        grads = network.backward(batch, entropy_grad_logits(logits) / n)
        sgd_step(network, grads, lr)
    return EntropyLog(-1, float(np.mean(metrics.entropy_bits(probs))), n)


def tent_adapt(network: Network, observations, lr: float, batch_size: int = 64):
    """Entropy minimisation on batch-norm parameters, one step per batch.

    Mutates and returns ``network`` (left in batch-statistics mode) together
    with a per-batch log.
    """
    _bn_only(network)
    x = np.asarray(observations, dtype=np.float64)
    log = []
    for i, batch in enumerate(_batches(x, batch_size)):
        entry = tent_step(network, batch, lr)
        entry.batch = i
        log.append(entry)
    return network, log


_MAX_E0 = 700.0


@dataclass
class EtaState:
    e0: float
    epsilon: float
    decay: float = 0.9
    ema: np.ndarray | None = None

    def __post_init__(self):
        if not self.e0 > 0:
            raise ParameterError("e0 must be positive")
        if not self.e0 < _MAX_E0:
            raise ParameterError(f"e0 must be below {_MAX_E0} so exp(e0) stays finite")
        if not 0 <= self.epsilon <= 1:
            raise ParameterError("epsilon must lie in [0, 1]")

    @classmethod
    def for_classes(cls, num_classes: int, epsilon: float = 0.4, decay: float = 0.9) -> "EtaState":
        return cls(e0=0.4 * math.log(num_classes), epsilon=epsilon, decay=decay)

    def update(self, accepted_probs) -> None:
        mean = np.atleast_2d(accepted_probs).mean(axis=0)
        self.ema = mean if self.ema is None else self.decay * self.ema + (1 - self.decay) * mean


def _cosine(rows, v):
    rows = np.atleast_2d(rows)
    denom = np.linalg.norm(rows, axis=1) * np.linalg.norm(v)
    return (rows @ v) / np.where(denom > 0, denom, 1.0)


def _weights(probs, state: EtaState) -> np.ndarray:
    probs = np.atleast_2d(probs)
    h = metrics.entropy_nats(probs)
    keep = h < state.e0
    if state.ema is not None:
        keep &= _cosine(probs, state.ema) <= state.epsilon
    return np.where(keep, np.exp(state.e0 - h), 0.0)


def eta_weight(p, state: EtaState, update: bool = True) -> float:
    """ETA reliability/redundancy weight of one probability row.

    Zero when the entropy (nats) reaches ``e0`` or the cosine similarity to the
    running mean of accepted predictions exceeds ``epsilon``; otherwise
    ``exp(e0 - entropy)``. An accepted row is folded into the running mean.
    """
    w = float(_weights(p, state)[0])
    if update and w > 0:
        state.update(p)
    return w


def eta_weights(probs, state: EtaState, update: bool = True) -> np.ndarray:
    """Batch form of ``eta_weight``: every row is judged against the running
    mean as it stood at the start of the batch, then the mean absorbs the
    accepted rows at once."""
    w = _weights(probs, state)
    if update and np.any(w > 0):
        state.update(np.atleast_2d(probs)[w > 0])
    return w


def eta_step(network: Network, batch, state: EtaState, lr: float) -> EntropyLog:
    logits = network.forward(batch)
    probs = softmax_temp(logits, 1.0)
    w = eta_weights(probs, state)
    accepted = int(np.count_nonzero(w))
    if accepted and lr > 0:
        grads = network.backward(batch, entropy_grad_logits(logits, w) / accepted)
        sgd_step(network, grads, lr)
    return EntropyLog(-1, float(np.mean(metrics.entropy_bits(probs))), accepted)


def eta_adapt(network: Network, observations, state: EtaState, lr: float, batch_size: int = 64):
    _bn_only(network)
    x = np.asarray(observations, dtype=np.float64)
    log = []
    for i, batch in enumerate(_batches(x, batch_size)):
        entry = eta_step(network, batch, state, lr)
        entry.batch = i
        log.append(entry)
    return network, log


@dataclass
class SupportSet:
    """Per-class prototype lists of ``(z, entropy)``; at most ``m`` kept per class."""

    supports: list[list[tuple[np.ndarray, float]]]
    m: int | None = None

    def __post_init__(self):
        if self.m is not None and self.m < 1:
            raise ParameterError("m must be >= 1 or None")

    @classmethod
    def from_classifier(cls, network: Network, m: int | None = None) -> "SupportSet":
        """Seed each class with its classifier weight column.

        The seed's entropy is that of the bias-free classifier applied to it.
        """
        w = network.classifier.params["weight"]
        seeds = w.T.copy()
        h = metrics.entropy_nats(softmax_temp(seeds @ w, 1.0))
        return cls([[(seeds[k], float(h[k]))] for k in range(w.shape[1])], m)

    @property
    def num_classes(self) -> int:
        return len(self.supports)

    def sizes(self) -> list[int]:
        return [len(s) for s in self.supports]

    def total(self) -> int:
        return sum(self.sizes())


def t3a_update(support: SupportSet, z, predicted: int, entropy: float) -> SupportSet:
    """Append ``z`` to class ``predicted``; evict the highest-entropy entries beyond ``m``."""
    if not 0 <= predicted < support.num_classes:
        raise ParameterError(f"class index {predicted} out of range")
    entries = support.supports[predicted]
    entries.append((np.asarray(z, dtype=np.float64), float(entropy)))
    if support.m is not None and len(entries) > support.m:
        # stable sort keeps insertion order among equal entropies
        entries.sort(key=lambda e: e[1])
        del entries[support.m:]
    return support


def t3a_centroids(support: SupportSet, fallback=None) -> np.ndarray:
    """Mean support of each class, stacked as rows ``(C, D)``.

    A class with no supports takes the matching row of ``fallback``.
    """
    rows = []
    for k, entries in enumerate(support.supports):
        if entries:
            rows.append(np.mean([z for z, _ in entries], axis=0))
        elif fallback is not None:
            rows.append(np.asarray(fallback[k], dtype=np.float64))
        else:
            raise ParameterError(f"class {k} has no supports and no fallback")
    return np.stack(rows)


def t3a_predict(z, centroids):
    """Returns ``(class indices, probability rows)`` for features ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    centroids = np.asarray(centroids, dtype=np.float64)
    if z.shape[1] != centroids.shape[1]:
        raise ShapeError(f"feature dim {z.shape[1]} does not match centroid dim {centroids.shape[1]}")
    probs = softmax_temp(z @ centroids.T, 1.0)
    return probs.argmax(axis=1), probs


@dataclass
class T3AModel:
    """Backbone feature extractor plus prototype classifier."""

    network: Network
    support: SupportSet
    seeds: np.ndarray = field(init=False)

    def __post_init__(self):
        self.seeds = self.network.classifier.params["weight"].T.copy()

    def centroids(self) -> np.ndarray:
        return t3a_centroids(self.support, self.seeds)

    def predict_proba(self, x) -> np.ndarray:
        return t3a_predict(self.network.features(x), self.centroids())[1]

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1)

    def observe(self, x) -> float:
        """Classify ``x`` with the current centroids, then file each feature
        vector under its predicted class. Returns mean entropy in bits."""
        z = self.network.features(x)
        pred, probs = t3a_predict(z, self.centroids())
        h = metrics.entropy_nats(probs)
        for zi, yi, hi in zip(z, pred, h):
            t3a_update(self.support, zi, int(yi), float(hi))
        return float(np.mean(h) / math.log(2))


def t3a_adapt(network: Network, observations, m: int | None = None, batch_size: int = 64):
    model = T3AModel(network, SupportSet.from_classifier(network, m))
    x = np.asarray(observations, dtype=np.float64)
    log = []
    for i, batch in enumerate(_batches(x, batch_size)):
        log.append(EntropyLog(i, model.observe(batch), batch.shape[0]))
    return model, log
