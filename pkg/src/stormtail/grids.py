"""Rainfall grids, intensity thresholds, and per-pixel classification.

Amounts are 6-hour accumulations in mm. The default schema uses the five
operational thresholds 0.1/3/10/20/50 mm, giving six intensity classes;
the top two classes are the heavy-rain classes. Values exactly on a
threshold belong to the higher class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

DEFAULT_THRESHOLDS = (0.1, 3.0, 10.0, 20.0, 50.0)


@dataclass(frozen=True)
class ThresholdSchema:
    """Ascending intensity thresholds and the heavy-class designation."""

    thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    heavy_classes: frozenset[int] = field(default_factory=lambda: frozenset({4, 5}))

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if len(t) == 0:
            raise ValidationError("schema needs at least one threshold")
        if any(not math.isfinite(x) or x <= 0 for x in t):
            raise ValidationError(f"thresholds must be finite and positive, got {t}")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValidationError(f"thresholds must be strictly increasing, got {t}")
        object.__setattr__(self, "thresholds", t)
        heavy = frozenset(int(k) for k in self.heavy_classes)
        if any(k < 0 or k >= self.num_classes for k in heavy):
            raise ValidationError(
                f"heavy classes {sorted(heavy)} outside [0, {self.num_classes})"
            )
        object.__setattr__(self, "heavy_classes", heavy)

    @property
    def num_classes(self) -> int:
        return len(self.thresholds) + 1


@dataclass(frozen=True)
class RainGrid:
    """Dense 2-D rainfall accumulations (mm per 6 h)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"rain grid must be 2-D, got shape {v.shape}")
        bad = ~np.isfinite(v)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite rainfall at pixel ({i}, {j})")
        neg = v < 0
        if neg.any():
            i, j = np.argwhere(neg)[0]
            raise ValidationError(
                f"negative rainfall {v[i, j]} at pixel ({i}, {j})"
            )
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClassField:
    """Per-pixel intensity class labels."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ValidationError(f"class field must be 2-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValidationError(f"class labels must be integers, got {lab.dtype}")
        if lab.size and (lab.min() < 0 or lab.max() >= self.num_classes):
            raise ValidationError(
                f"labels outside [0, {self.num_classes}): "
                f"min={lab.min()}, max={lab.max()}"
            )
        object.__setattr__(self, "labels", lab.astype(np.int64))


def classify(rain: RainGrid, schema: ThresholdSchema) -> ClassField:
    """Map each pixel to the number of thresholds at or below its value.

    A value v lands in class k when t_k <= v < t_{k+1} (boundaries belong
    to the higher class); v >= top threshold lands in the last class.
    """
    thresholds = np.asarray(schema.thresholds)
    labels = np.searchsorted(thresholds, rain.values, side="right")
    return ClassField(labels=labels.astype(np.int64), num_classes=schema.num_classes)


def classify_values(values: np.ndarray, schema: ThresholdSchema) -> np.ndarray:
    """classify() for a bare array; validates via RainGrid."""
    return classify(RainGrid(values=values), schema).labels


def event_mask(values: np.ndarray | RainGrid, threshold: float) -> np.ndarray:
    """Binary exceedance mask: 1 where the field is at or above threshold."""
    if not math.isfinite(threshold):
        raise ValidationError(f"threshold must be finite, got {threshold}")
    if threshold <= 0:
        raise ValidationError(f"threshold must be positive, got {threshold}")
    v = values.values if isinstance(values, RainGrid) else np.asarray(values)
    return (v >= threshold).astype(np.uint8)
