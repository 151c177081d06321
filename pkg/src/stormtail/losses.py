"""Imbalance-aware loss system for the dual-branch segmentation model.

The total objective mixes two branch losses: the spatial branch trains
with heavy-rain Dice plus frequency-weighted cross-entropy on
rarity-perturbed logits, the main branch with heavy-rain Dice plus
cross-entropy on prior-adjusted logits:

    overall  = (1 - alpha) * main + alpha * spatial
    spatial  = gamma * dice + (1 - gamma) * wce(z + blv_noise)
    main     = (1 - gamma) * ce(z + tau * log prior) + gamma * dice

Class statistics are pixel counts from the training split.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError, ValidationError

_PROB_TOL = 1e-4


@dataclass(frozen=True)
class ClassStats:
    """Per-class pixel counts and the derived empirical priors."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 1 or c.size < 2:
            raise ValidationError(f"counts must be 1-D with >= 2 classes, got shape {c.shape}")
        if (c < 0).any():
            raise ValidationError("class counts must be nonnegative")
        if c.sum() == 0:
            raise ValidationError("class counts are all zero")
        object.__setattr__(self, "counts", c)

    @property
    def num_classes(self) -> int:
        return self.counts.size

    @property
    def priors(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    @classmethod
    def from_labels(cls, labels: np.ndarray | list[np.ndarray], num_classes: int) -> "ClassStats":
        arrs = labels if isinstance(labels, list) else [labels]
        counts = np.zeros(num_classes, dtype=np.int64)
        for a in arrs:
            counts += np.bincount(np.asarray(a).ravel(), minlength=num_classes)
        return cls(counts=counts)

    def floored(self, min_count: int = 1) -> "ClassStats":
        """Replace absent-class counts with a floor so weights stay finite."""
        return ClassStats(counts=np.maximum(self.counts, min_count))


@dataclass(frozen=True)
class LossConfig:
    """Weights and scales of the loss system (defaults from the tuned setup)."""

    alpha: float = 0.5            # spatial-branch share of the overall loss
    gamma: float = 0.7            # Dice share inside each branch loss
    tau: float = 0.5              # prior-shift scale for logit adjustment
    sigma: float = 0.5            # std of the rarity-scaled logit noise
    dice_smoothing: float = 1.0   # count-unit smoothing in the Dice ratio
    heavy_classes: tuple[int, ...] = (4, 5)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.tau < 0 or self.sigma < 0:
            raise ConfigError("tau and sigma must be >= 0")
        if self.dice_smoothing <= 0:
            raise ConfigError("dice_smoothing must be > 0")
        if self.gamma <= 0.5:
            warnings.warn(
                f"gamma={self.gamma} <= 0.5: the overlap term is meant to dominate "
                "the branch losses",
                stacklevel=2,
            )


def _check_target(logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.ndim != 4:
        raise ValidationError(f"logits must be [B, C, H, W], got {tuple(logits.shape)}")
    if target.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValidationError(
            f"target shape {tuple(target.shape)} does not match logits {tuple(logits.shape)}"
        )


def dice_heavy(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Overlap loss on the pooled heavy-class mass.

    Light classes merge into background; the positive "probability" of a
    pixel is the sum of its heavy-class probabilities. Sums run over the
    whole batch, so the loss is a single global Dice complement.
    """
    _check_target(probs, target)
    sums = probs.sum(dim=1)
    if (sums - 1.0).abs().max().item() > _PROB_TOL:
        raise ValidationError("dice_heavy expects softmax-normalized probabilities")
    heavy = list(cfg.heavy_classes)
    p = probs[:, heavy].sum(dim=1)
    t = torch.zeros_like(p)
    for k in heavy:
        t = t + (target == k).to(p.dtype)
    eps = cfg.dice_smoothing
    dice = (2.0 * (p * t).sum() + eps) / (p.sum() + t.sum() + eps)
    return 1.0 - dice


def wce_weights(stats: ClassStats) -> torch.Tensor:
    """Square-root inverse-frequency class weights, normalized to mean 1."""
    if (stats.counts == 0).any():
        missing = np.flatnonzero(stats.counts == 0).tolist()
        raise DataError(
            f"classes {missing} absent from training data; use ClassStats.floored() "
            "to impose a floor count before weighting"
        )
    w = np.sqrt(1.0 / stats.priors)
    w = w * (w.size / w.sum())
    return torch.from_numpy(w)


def rarity_noise_scales(stats: ClassStats) -> torch.Tensor:
    """Per-class noise scale c_k / max_j c_j with c_k = log(total / count_k)."""
    if (stats.counts == 0).any():
        missing = np.flatnonzero(stats.counts == 0).tolist()
        raise DataError(
            f"classes {missing} absent from training data; use ClassStats.floored()"
        )
    c = np.log(stats.counts.sum() / stats.counts)
    return torch.from_numpy(c / c.max())


def blv_perturb(
    logits: torch.Tensor,
    stats: ClassStats,
    sigma: float,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    training: bool = True,
) -> torch.Tensor:
    """Add rarity-scaled Gaussian noise to the logits (training only).

    Rare classes get noise of nearly full strength sigma, frequent classes
    proportionally less. Fresh noise per pixel and per class. With
    sigma == 0, outside training, the input is returned unchanged.
    ``noise`` lets callers freeze a standard-normal realization.
    """
    if sigma == 0.0 or not training:
        return logits
    scales = rarity_noise_scales(stats).to(dtype=logits.dtype, device=logits.device)
    if logits.shape[1] != scales.shape[0]:
        raise ValidationError(
            f"logits have {logits.shape[1]} classes, stats {scales.shape[0]}"
        )
    if noise is None:
        noise = torch.randn(logits.shape, generator=rng, dtype=logits.dtype, device=logits.device)
    elif noise.shape != logits.shape:
        raise ValidationError("frozen noise must match the logits shape")
    return logits + scales.view(1, -1, 1, 1) * (sigma * noise)


def la_adjust(logits: torch.Tensor, stats: ClassStats, tau: float) -> torch.Tensor:
    """Shift each class logit by tau * log(prior). Identity at tau == 0."""
    if tau == 0.0:
        return logits
    priors = stats.priors
    if (priors == 0).any():
        missing = np.flatnonzero(priors == 0).tolist()
        raise DataError(f"zero prior for classes {missing}; cannot log-adjust")
    shift = tau * torch.from_numpy(np.log(priors)).to(dtype=logits.dtype, device=logits.device)
    if logits.shape[1] != shift.shape[0]:
        raise ValidationError(
            f"logits have {logits.shape[1]} classes, stats {shift.shape[0]}"
        )
    return logits + shift.view(1, -1, 1, 1)


def pixel_mean_ce(
    logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None
) -> torch.Tensor:
    """Cross-entropy averaged over pixels; optional per-true-class weights."""
    _check_target(logits, target)
    nll = F.cross_entropy(logits, target, reduction="none")
    if weights is not None:
        nll = nll * weights.to(dtype=logits.dtype, device=logits.device)[target]
    return nll.mean()


def spatial_loss(
    spatial_logits: torch.Tensor,
    target: torch.Tensor,
    stats: ClassStats,
    cfg: LossConfig,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    training: bool = True,
) -> torch.Tensor:
    """Auxiliary branch loss: gamma * Dice + (1 - gamma) * noisy WCE."""
    probs = F.softmax(spatial_logits, dim=1)
    dice = dice_heavy(probs, target, cfg)
    z_hat = blv_perturb(spatial_logits, stats, cfg.sigma, rng=rng, noise=noise, training=training)
    wce = pixel_mean_ce(z_hat, target, weights=wce_weights(stats))
    return cfg.gamma * dice + (1.0 - cfg.gamma) * wce


def main_loss(
    main_logits: torch.Tensor,
    target: torch.Tensor,
    stats: ClassStats,
    cfg: LossConfig,
) -> torch.Tensor:
    """Main branch loss: (1 - gamma) * prior-adjusted CE + gamma * Dice.

    Dice sees the unadjusted probabilities; only the CE term uses the
    adjusted logits.
    """
    probs = F.softmax(main_logits, dim=1)
    dice = dice_heavy(probs, target, cfg)
    ce = pixel_mean_ce(la_adjust(main_logits, stats, cfg.tau), target)
    return (1.0 - cfg.gamma) * ce + cfg.gamma * dice


def overall_loss(
    main_logits: torch.Tensor,
    spatial_logits: torch.Tensor,
    target: torch.Tensor,
    stats: ClassStats,
    cfg: LossConfig,
    rng: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    training: bool = True,
) -> torch.Tensor:
    """(1 - alpha) * main + alpha * spatial."""
    main = main_loss(main_logits, target, stats, cfg)
    spatial = spatial_loss(
        spatial_logits, target, stats, cfg, rng=rng, noise=noise, training=training
    )
    return (1.0 - cfg.alpha) * main + cfg.alpha * spatial
