"""Class-conditional (Mondrian) conformal prediction sets for pixel classes.

The conformity score of a pixel with true class y is 1 - p_y. Calibration
computes a conservative per-class quantile of those scores; at test time a
class enters a pixel's prediction set when 1 - p_k <= q_k. Sets can be
empty; they are reported as-is unless force_argmax is requested.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_PROB_TOL = 1e-4


def _check_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim < 2:
        raise ValidationError(f"probs must be [..., C] or [C, H, W], got shape {p.shape}")
    return p


@dataclass(frozen=True)
class ConformalCalibration:
    """Per-class conformity thresholds plus the calibration counts."""

    alpha: float
    q: np.ndarray            # [C] thresholds in [0, 1]
    counts: np.ndarray       # [C] calibration pixels per class

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        c = np.asarray(self.counts, dtype=np.int64)
        if not 0 < self.alpha < 1:
            raise ValidationError(f"alpha must be in (0, 1), got {self.alpha}")
        if q.shape != c.shape or q.ndim != 1:
            raise ValidationError("q and counts must be matching 1-D arrays")
        if (q < 0).any() or (q > 1).any():
            raise ValidationError("thresholds must lie in [0, 1]")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.q.shape[0]


def conformity_scores(
    probs: np.ndarray, labels: np.ndarray, num_classes: int
) -> dict[int, np.ndarray]:
    """Score every pixel by 1 - p_true and group scores by true class.

    ``probs`` is [C, H, W] (or [N, C] row-wise); ``labels`` matches the
    spatial shape. Probabilities must be normalized.
    """
    p = _check_probs(probs)
    lab = np.asarray(labels)
    if p.ndim == 3:  # [C, H, W] -> [N, C]
        if p.shape[1:] != lab.shape:
            raise ValidationError(f"probs {p.shape} do not match labels {lab.shape}")
        p = p.reshape(p.shape[0], -1).T
        lab = lab.reshape(-1)
    if p.shape[0] != lab.shape[0]:
        raise ValidationError(f"{p.shape[0]} probability rows vs {lab.shape[0]} labels")
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise ValidationError(
            f"label outside [0, {num_classes}): min={lab.min()}, max={lab.max()}"
        )
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > _PROB_TOL:
        raise ValidationError("probabilities are not softmax-normalized")
    s = 1.0 - p[np.arange(p.shape[0]), lab]
    return {k: s[lab == k] for k in range(num_classes)}


def calibrate(
    scores_by_class: dict[int, np.ndarray], alpha: float, num_classes: int | None = None
) -> ConformalCalibration:
    """Conservative per-class (1 - alpha)-quantiles of conformity scores.

    q_k is the ceil((1-alpha)(N_k+1))-th order statistic; when that index
    exceeds N_k (including unrepresented classes) q_k = 1, the maximally
    conservative threshold.
    """
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha must be in (0, 1), got {alpha}")
    c = num_classes if num_classes is not None else (max(scores_by_class) + 1)
    q = np.ones(c)
    counts = np.zeros(c, dtype=np.int64)
    for k in range(c):
        s = np.sort(np.asarray(scores_by_class.get(k, ()), dtype=np.float64))
        counts[k] = s.size
        if s.size == 0:
            warnings.warn(f"class {k} unrepresented in calibration; q set to 1")
            continue
        m = math.ceil((1 - alpha) * (s.size + 1))
        q[k] = 1.0 if m > s.size else float(s[m - 1])
    return ConformalCalibration(alpha=alpha, q=q, counts=counts)


def predict_set(probs: np.ndarray, calib: ConformalCalibration) -> np.ndarray:
    """Boolean membership mask: class k is in the set iff 1 - p_k <= q_k.

    Output has the same shape as ``probs`` ([C, H, W] or [N, C]).
    """
    p = _check_probs(probs)
    if p.ndim == 3:
        if p.shape[0] != calib.num_classes:
            raise ValidationError(
                f"probs have {p.shape[0]} classes, calibration {calib.num_classes}"
            )
        return (1.0 - p) <= calib.q[:, None, None]
    if p.shape[-1] != calib.num_classes:
        raise ValidationError(
            f"probs have {p.shape[-1]} classes, calibration {calib.num_classes}"
        )
    return (1.0 - p) <= calib.q


def force_argmax(sets: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Optional operational patch: guarantee the argmax class is included."""
    p = _check_probs(probs)
    out = sets.copy()
    if p.ndim == 3:
        top = p.argmax(axis=0)
        h, w = top.shape
        out[top, np.arange(h)[:, None], np.arange(w)[None, :]] = True
    else:
        out[np.arange(p.shape[0]), p.argmax(axis=1)] = True
    return out


def _sets_labels_2d(sets: np.ndarray, labels: np.ndarray | None):
    s = np.asarray(sets, dtype=bool)
    if s.ndim == 3:  # [C, H, W] -> [N, C]
        s = s.reshape(s.shape[0], -1).T
        if labels is not None:
            labels = np.asarray(labels).reshape(-1)
    return s, labels


def picp(sets: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of pixels whose true class lies inside the prediction set."""
    s, lab = _sets_labels_2d(sets, labels)
    if s.shape[0] != lab.shape[0]:
        raise ValidationError(f"{s.shape[0]} sets vs {lab.shape[0]} labels")
    return float(np.mean(s[np.arange(s.shape[0]), lab]))


def class_conditional_picp(sets: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float | None]:
    """PICP restricted to pixels of each true class (None when absent)."""
    s, lab = _sets_labels_2d(sets, labels)
    hit = s[np.arange(s.shape[0]), lab]
    return [
        float(hit[lab == k].mean()) if (lab == k).any() else None
        for k in range(num_classes)
    ]


def avg_set_size(sets: np.ndarray) -> float:
    """Mean number of candidate classes per pixel."""
    s, _ = _sets_labels_2d(sets, None)
    return float(s.sum(axis=1).mean())
