"""Change-aware evaluation: per-class F1, harmonic/pixel-weighted variants,
and the geometric-mean instruction/quality score.

Damage masks use class 0 for ignore/background and 1..4 for
none/minor/major/destroyed.  A class is ABSENT (excluded from harmonic
aggregation, encoded as NaN) when it has no true positives, false positives,
or false negatives at all; the stabilizer epsilon would otherwise zero the
whole score whenever a class simply does not occur.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, UndefinedMetricError

NUM_CLASSES = 4
F1_EPS = 1e-6


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN plus ground-truth pixel counts (classes 1..4)."""

    tp: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    fp: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    fn: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))
    n: np.ndarray = field(default_factory=lambda: np.zeros(NUM_CLASSES, dtype=np.int64))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.n + other.n)


def _validate_mask(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise InputError(f"{name} mask must be 2-d, got shape {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise InputError(f"{name} mask must be integer-typed, got {mask.dtype}")
    if mask.size and (mask.min() < 0 or mask.max() > NUM_CLASSES):
        raise InputError(
            f"{name} mask classes must lie in 0..{NUM_CLASSES}, "
            f"got {mask.min()}..{mask.max()}")
    return mask


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Count TP/FP/FN per damage class; pixels with gt == 0 are ignored."""
    pred = _validate_mask(pred, "predicted")
    gt = _validate_mask(gt, "ground-truth")
    if pred.shape != gt.shape:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    scored = gt > 0
    counts = ConfusionCounts()
    for c in range(1, NUM_CLASSES + 1):
        pred_c = (pred == c) & scored
        gt_c = gt == c
        counts.tp[c - 1] = np.count_nonzero(pred_c & gt_c)
        counts.fp[c - 1] = np.count_nonzero(pred_c & ~gt_c)
        counts.fn[c - 1] = np.count_nonzero(~pred_c & gt_c)
        counts.n[c - 1] = np.count_nonzero(gt_c)
    return counts


def f1_per_class(counts: ConfusionCounts) -> np.ndarray:
    """F1_c = 2 TP / (2 TP + FP + FN); NaN marks an ABSENT class."""
    denom = 2 * counts.tp + counts.fp + counts.fn
    out = np.full(NUM_CLASSES, np.nan)
    live = denom > 0
    out[live] = 2.0 * counts.tp[live] / denom[live]
    return out


def f1_dam(per_class: np.ndarray, eps: float = F1_EPS) -> float:
    """Harmonic aggregation over participating classes, reported on 0..100.

    K participating classes give K / sum((F1_c + eps)^-1); ABSENT classes
    (NaN) are excluded and reduce the numerator accordingly.
    """
    per_class = np.asarray(per_class, dtype=np.float64)
    live = ~np.isnan(per_class)
    k = int(live.sum())
    if k == 0:
        raise UndefinedMetricError("no participating class for harmonic F1")
    return 100.0 * k / np.sum(1.0 / (per_class[live] + eps))


def f1_weighted(per_class: np.ndarray, n: np.ndarray) -> float:
    """Pixel-weighted mean of per-class F1 over classes with ground truth."""
    per_class = np.asarray(per_class, dtype=np.float64)
    n = np.asarray(n)
    live = n > 0
    if not live.any():
        raise UndefinedMetricError("no ground-truth pixels in any class")
    return float(np.sum(per_class[live] * n[live]) / np.sum(n[live]))


@dataclass
class VIESample:
    """One sample's VLM-style ratings, both on a 0..10 scale."""

    sc: float
    pq: float

    def __post_init__(self):
        for name, value in (("sc", self.sc), ("pq", self.pq)):
            if not 0.0 <= value <= 10.0:
                raise InputError(f"{name} score {value} outside [0, 10]")


def vie_score(sample: VIESample) -> float:
    """Geometric mean of the consistency and quality ratings."""
    return float(np.sqrt(sample.sc * sample.pq))


def aggregate_vie(samples) -> dict[str, float]:
    """Dataset means of SC, PQ, and the per-sample geometric scores.

    The per-sample geometric mean is averaged (not recomputed from mean SC
    and mean PQ; the two orderings genuinely differ).
    """
    samples = list(samples)
    if not samples:
        raise UndefinedMetricError("no rating samples to aggregate")
    return {
        "sc": float(np.mean([s.sc for s in samples])),
        "pq": float(np.mean([s.pq for s in samples])),
        "vie": float(np.mean([vie_score(s) for s in samples])),
    }
