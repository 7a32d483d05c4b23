"""Calibration and certainty metrics.

Entropy reported to users is in bits; the entropy-minimisation losses use
nats (``entropy_nats``). Functions taking a probability "row" also accept a
2-D array and then work row-wise.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError

LOG_CLAMP = 1e-12


def _check_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise InputError("probabilities must be non-negative")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6, rtol=0):
        raise InputError("probability rows must sum to 1")
    return p


def _entropy(p, log):
    p = _check_probs(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    # Rounding can leave -0.0 or a hair below zero for one-hot rows.
    return np.maximum(h, 0.0) if np.ndim(h) else max(float(h), 0.0)


def entropy_bits(p):
    """Shannon entropy in bits, with 0 log 0 taken as 0."""
    return _entropy(p, np.log2)


def entropy_nats(p):
    return _entropy(p, np.log)


def certainty(p):
    """Reciprocal of ``entropy_bits``; ``math.inf`` where the entropy is zero."""
    h = entropy_bits(p)
    with np.errstate(divide="ignore"):
        c = np.where(h > 0, 1.0 / np.where(h > 0, h, 1.0), np.inf)
    return c if np.ndim(c) else float(c)


def logit_norm(logits):
    return np.linalg.norm(np.asarray(logits, dtype=np.float64), axis=-1)


@dataclass(frozen=True)
class PredictionBatch:
    probabilities: np.ndarray
    predictions: np.ndarray
    confidences: np.ndarray
    labels: np.ndarray | None = None

    @classmethod
    def from_probabilities(cls, probabilities, labels=None) -> "PredictionBatch":
        p = _check_probs(np.atleast_2d(probabilities))
        y = None if labels is None else np.asarray(labels, dtype=np.int64)
        if y is not None and y.shape != (p.shape[0],):
            raise InputError(f"labels shape {y.shape} does not match {p.shape[0]} predictions")
        return cls(p, p.argmax(axis=1), p.max(axis=1), y)

    def __len__(self) -> int:
        return self.probabilities.shape[0]

    def _require_labels(self):
        if len(self) == 0:
            raise InputError("empty prediction batch")
        if self.labels is None:
            raise InputError("true labels are required")
        return self.labels


def accuracy(predictions: PredictionBatch) -> float:
    labels = predictions._require_labels()
    return float(np.mean(predictions.predictions == labels))


@dataclass(frozen=True)
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    mean_confidence: np.ndarray
    accuracy: np.ndarray

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def ece(self) -> float:
        n = self.counts.sum()
        gaps = np.abs(self.accuracy - self.mean_confidence)
        return float(np.sum(self.counts / n * gaps))

    def to_csv(self) -> str:
        """Rows of ``bin_low,bin_high,count,mean_confidence,accuracy``.

        Empty bins report 0 for both mean confidence and accuracy.
        """
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "mean_confidence", "accuracy"])
        for k in range(self.n_bins):
            w.writerow([repr(float(self.edges[k])), repr(float(self.edges[k + 1])), int(self.counts[k]),
                        repr(float(self.mean_confidence[k])), repr(float(self.accuracy[k]))])
        return buf.getvalue()


def bin_index(confidences, bins: int) -> np.ndarray:
    # [k/bins, (k+1)/bins), last bin closed at 1. The product c*bins can land a
    # rounding step off an edge, so compare against the edges k/bins themselves.
    c = np.asarray(confidences, dtype=np.float64)
    idx = np.floor(c * bins).astype(np.int64)
    idx += c >= (idx + 1) / bins
    idx -= c < idx / bins
    return np.clip(idx, 0, bins - 1)


def reliability_bins(predictions: PredictionBatch, bins: int = 15) -> ReliabilityBins:
    labels = predictions._require_labels()
    if bins < 1:
        raise InputError("bins must be >= 1")
    idx = bin_index(predictions.confidences, bins)
    correct = (predictions.predictions == labels).astype(np.float64)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=predictions.confidences, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    safe = np.maximum(counts, 1)
    return ReliabilityBins(
        edges=np.arange(bins + 1) / bins,
        counts=counts,
        mean_confidence=np.where(counts > 0, conf_sum / safe, 0.0),
        accuracy=np.where(counts > 0, acc_sum / safe, 0.0),
    )


def ece(predictions: PredictionBatch, bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins."""
    return reliability_bins(predictions, bins).ece()


def max_entropy_bits(num_classes: int) -> float:
    return math.log2(num_classes)
