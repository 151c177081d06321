"""Dataset-level evaluation: thresholded masks to verification summaries."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .grids import ThresholdSchema
from .metrics import (
    bootstrap_ci,
    contingency,
    coverage_ranking,
    fss,
    mean_scores,
    pooled_scores,
)
from .training import Prediction

SCHEMA_VERSION = 1


def masks_at_class(predictions: list[Prediction], samples, k: int, threshold: float):
    """Event masks for class >= k: prediction from labels, truth from rain."""
    pred_masks = [p.labels >= k for p in predictions]
    obs_masks = [s.target_rain.values >= threshold for s in samples]
    return pred_masks, obs_masks


def evaluate_dataset(
    predictions: list[Prediction],
    samples,
    schema: ThresholdSchema | None = None,
    fss_n: int = 5,
    n_boot: int = 1000,
    boot_seed: int = 0,
    ci_metrics: tuple[str, ...] = ("csi",),
    top_fracs: tuple[float, ...] = (0.25, 0.10, 0.05, 0.01),
    heavy_threshold: float | None = None,
) -> dict:
    """Pooled and per-sample-mean scores at every schema threshold.

    Includes FSS (sample mean), bootstrap CIs for the requested metrics,
    and the high-coverage ranking table at the heavy threshold.
    """
    if len(predictions) != len(samples) or not samples:
        raise ValidationError("predictions and samples must align and be nonempty")
    schema = schema or ThresholdSchema()
    heavy_threshold = heavy_threshold if heavy_threshold is not None else schema.thresholds[-1]
    out: dict = {"schema_version": SCHEMA_VERSION, "num_samples": len(samples), "thresholds": {}}
    rng = np.random.default_rng(boot_seed)
    for k, t in enumerate(schema.thresholds, start=1):
        pred_masks, obs_masks = masks_at_class(predictions, samples, k, t)
        tables = [contingency(p, o) for p, o in zip(pred_masks, obs_masks)]
        fss_vals = [fss(p, o, fss_n) for p, o in zip(pred_masks, obs_masks)]
        cis = {}
        for m in ci_metrics:
            ci = bootstrap_ci(tables, m, n_boot=n_boot, rng=rng)
            cis[m] = list(ci) if ci is not None else None
        out["thresholds"][f"{t:g}"] = {
            "pooled": pooled_scores(tables).as_dict(),
            "mean": mean_scores(tables).as_dict(),
            "fss": float(np.mean(fss_vals)),
            "fss_n": fss_n,
            "ci": cis,
        }
    k_heavy = schema.thresholds.index(heavy_threshold) + 1
    pred_masks, obs_masks = masks_at_class(predictions, samples, k_heavy, heavy_threshold)
    ranking = coverage_ranking(pred_masks, obs_masks, top_fracs=top_fracs, fss_n=fss_n)
    out["coverage_ranking"] = {
        f"{frac:g}": {
            "num_samples": entry["num_samples"],
            "scores": entry["scores"].as_dict(),
            "fss": entry["fss"],
        }
        for frac, entry in ranking.items()
    }
    return out
