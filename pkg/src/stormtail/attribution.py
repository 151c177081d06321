"""Integrated-gradients channel attribution.

The path integral from a zero baseline to the input is approximated with
a midpoint Riemann sum of input gradients; a channel's attribution is the
sum of its pixel attributions. Pixel-wise class logits reduce to a scalar
by averaging each pixel's predicted-class logit over either all pixels or
only the pixels predicted as heavy rain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .errors import DataError, ValidationError

REDUCTIONS = ("all_pixels", "heavy_pixels")


def integrated_gradients(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    steps: int = 50,
    baseline: torch.Tensor | None = None,
    chunk: int = 16,
) -> torch.Tensor:
    """Midpoint-rule path integral of grad f from baseline to x.

    ``f`` maps a batch [B, ...] to per-sample scalars [B]; ``x`` is a
    single input (no batch dim). Returns an attribution tensor shaped like
    x: (x - baseline) * mean of gradients along the path.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    if baseline is None:
        baseline = torch.zeros_like(x)
    if baseline.shape != x.shape:
        raise ValidationError("baseline must match the input shape")
    diff = x - baseline
    alphas = (torch.arange(steps, dtype=x.dtype, device=x.device) + 0.5) / steps
    grad_sum = torch.zeros_like(x)
    for lo in range(0, steps, chunk):
        a = alphas[lo : lo + chunk].view(-1, *([1] * x.ndim))
        xa = (baseline.unsqueeze(0) + a * diff.unsqueeze(0)).detach().requires_grad_(True)
        y = f(xa)
        if y.ndim != 1 or y.shape[0] != xa.shape[0]:
            raise ValidationError("f must return one scalar per batch row")
        if y.requires_grad:  # constant models have no path to the input
            (g,) = torch.autograd.grad(y.sum(), xa, allow_unused=True)
            if g is not None:
                grad_sum = grad_sum + g.sum(dim=0)
    return diff * (grad_sum / steps)


def _logit_reduction(
    model: torch.nn.Module,
    x: torch.Tensor,
    reduction: str,
    heavy_classes: tuple[int, ...],
    heavy_from_truth: np.ndarray | None,
) -> Callable[[torch.Tensor], torch.Tensor] | None:
    """Build the scalar head for one sample; None when no heavy pixels."""
    with torch.no_grad():
        logits = model(x.unsqueeze(0)).main_logits[0]
    pred = logits.argmax(dim=0)
    if reduction == "all_pixels":
        mask = torch.ones_like(pred, dtype=torch.bool)
    else:
        if heavy_from_truth is not None:
            labels = torch.from_numpy(np.asarray(heavy_from_truth))
            mask = torch.zeros_like(pred, dtype=torch.bool)
            for k in heavy_classes:
                mask |= labels == k
        else:
            mask = torch.zeros_like(pred, dtype=torch.bool)
            for k in heavy_classes:
                mask |= pred == k
        if not bool(mask.any()):
            return None
    pred_fixed = pred.clone()
    mask_fixed = mask.clone()

    def f(batch: torch.Tensor) -> torch.Tensor:
        out = model(batch).main_logits
        idx = pred_fixed[None, None].expand(batch.shape[0], 1, *pred_fixed.shape)
        picked = out.gather(1, idx).squeeze(1)
        flat = picked.reshape(batch.shape[0], -1)
        sel = mask_fixed.reshape(-1)
        return flat[:, sel].mean(dim=1)

    return f


def channel_attribution(
    model: torch.nn.Module,
    x: torch.Tensor,
    reduction: str = "all_pixels",
    steps: int = 50,
    heavy_classes: tuple[int, ...] = (4, 5),
    heavy_from_truth: np.ndarray | None = None,
) -> np.ndarray | None:
    """Per-channel attribution for one [C, H, W] input; None if skipped.

    With the heavy-pixel reduction, membership comes from the model's own
    argmax prediction unless ground-truth labels are supplied.
    """
    if reduction not in REDUCTIONS:
        raise ValidationError(f"unknown reduction {reduction!r}; pick from {REDUCTIONS}")
    f = _logit_reduction(model, x, reduction, heavy_classes, heavy_from_truth)
    if f is None:
        return None
    attr = integrated_gradients(f, x, steps=steps)
    return attr.sum(dim=(1, 2)).detach().cpu().numpy()


@dataclass
class AttributionResult:
    """Mean per-channel attribution plus the normalized importance views."""

    per_channel: np.ndarray
    channel_names: tuple[str, ...]
    reduction: str
    steps: int
    baseline: str = "zero"
    num_samples: int = 0
    num_skipped: int = 0
    views: dict = field(default_factory=dict)


def aggregate_importance(
    per_sample: list[np.ndarray],
    channel_names: tuple[str, ...],
    pressure_level_count: int = 20,
    reduction: str = "all_pixels",
    steps: int = 50,
    num_skipped: int = 0,
) -> AttributionResult:
    """Average absolute attributions over samples and normalize.

    Sign handling is absolute-value aggregation: opposite-signed sample
    attributions must not cancel. The "pressure_levels" view normalizes
    within the leading pressure-level channels; the "all" view across the
    full channel list. Each view sums to 1.
    """
    if not per_sample:
        raise DataError("no successful sample attributions to aggregate")
    stacked = np.abs(np.stack(per_sample))
    mean_abs = stacked.mean(axis=0)
    views: dict[str, dict[str, float]] = {}
    pl = mean_abs[:pressure_level_count]
    if pl.sum() > 0:
        views["pressure_levels"] = {
            channel_names[i]: float(pl[i] / pl.sum()) for i in range(pressure_level_count)
        }
    if mean_abs.sum() > 0:
        views["all"] = {
            channel_names[i]: float(mean_abs[i] / mean_abs.sum()) for i in range(len(channel_names))
        }
    return AttributionResult(
        per_channel=mean_abs,
        channel_names=tuple(channel_names),
        reduction=reduction,
        steps=steps,
        num_samples=len(per_sample),
        num_skipped=num_skipped,
        views=views,
    )
