"""Empirical quantile mapping from forecast rainfall to observed rainfall.

Quantiles are pooled over all training pixels. Application is monotone
interpolation through matched source/target quantiles; above the top
source quantile values scale by the outermost quantile ratio, below the
bottom they shift additively (both keep an identical-distribution fit at
the identity map).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, ValidationError
from .grids import RainGrid

DEFAULT_QUANTILE_GRID = 201


@dataclass(frozen=True)
class QMModel:
    """Matched ascending source/target quantiles over a [0, 1] grid."""

    source_quantiles: np.ndarray
    target_quantiles: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.source_quantiles, dtype=np.float64)
        t = np.asarray(self.target_quantiles, dtype=np.float64)
        if s.shape != t.shape or s.ndim != 1 or s.size < 2:
            raise ValidationError("quantile arrays must be matching 1-D with >= 2 points")
        if (np.diff(s) < 0).any() or (np.diff(t) < 0).any():
            raise ValidationError("quantile arrays must be nondecreasing")
        object.__setattr__(self, "source_quantiles", s)
        object.__setattr__(self, "target_quantiles", t)


def fit_qm(
    forecasts: list[np.ndarray],
    observations: list[np.ndarray],
    grid_size: int = DEFAULT_QUANTILE_GRID,
) -> QMModel:
    """Match empirical quantiles of pooled forecast and observed pixels."""
    if not forecasts or not observations:
        raise DataError("empty training pool for quantile mapping")
    src = np.concatenate([np.asarray(f, dtype=np.float64).ravel() for f in forecasts])
    tgt = np.concatenate([np.asarray(o, dtype=np.float64).ravel() for o in observations])
    if src.size == 0 or tgt.size == 0:
        raise DataError("empty training pool for quantile mapping")
    probs = np.linspace(0.0, 1.0, grid_size)
    return QMModel(
        source_quantiles=np.quantile(src, probs),
        target_quantiles=np.quantile(tgt, probs),
    )


def apply_qm_values(values: np.ndarray, qm: QMModel) -> np.ndarray:
    """Map an array of forecast values through the fitted quantile curve."""
    x = np.asarray(values, dtype=np.float64)
    s, t = qm.source_quantiles, qm.target_quantiles
    out = np.interp(x, s, t)
    above = x > s[-1]
    if above.any():
        ratio = t[-1] / s[-1] if s[-1] > 0 else 1.0
        out[above] = x[above] * ratio
    below = x < s[0]
    if below.any():
        out[below] = t[0] + (x[below] - s[0])
    return out


def apply_qm(forecast: RainGrid, qm: QMModel) -> RainGrid:
    """apply_qm_values on a rain grid; output clamped to physical range."""
    mapped = np.maximum(apply_qm_values(forecast.values, qm), 0.0)
    return RainGrid(values=mapped)
