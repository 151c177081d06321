"""Adaptive fusion of backbone and spatial-branch features.

Concatenated features pass through channel attention and a fusing conv to
give the preliminary fused map Z. Cosine similarities between each pixel
of Z and its eight neighbors feed an offset generator that predicts, per
channel group, a direction field and a sigmoid magnitude field whose
product is the resampling offset. Features are then re-read at the offset
locations with bilinear interpolation and border clamping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ValidationError

log = logging.getLogger(__name__)

# Row-major neighbor order: NW, N, NE, W, E, SW, S, SE.
NEIGHBOR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))

_ZERO_NORM_EPS = 1e-12


@dataclass
class FusionTensors:
    """Intermediate tensors of one fusion pass (for inspection and tests)."""

    z: torch.Tensor          # [B, C, H, W] preliminary fused features
    similarity: torch.Tensor  # [B, 8, H, W] neighbor cosine similarities
    direction: torch.Tensor   # [B, 2G, H, W]
    magnitude: torch.Tensor   # [B, 2G, H, W], sigmoid range
    offsets: torch.Tensor     # [B, 2G, H, W] = direction * magnitude
    out: torch.Tensor         # [B, C, H, W] resampled features


def neighbor_similarity(z: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of each pixel's feature vector with its 8 neighbors.

    Borders replicate the edge pixels. Zero-norm vectors get similarity 0
    (logged at debug level). Values are clamped to [-1, 1], which only
    removes floating-point overshoot.
    """
    if z.ndim != 4 or z.shape[1] < 1:
        raise ValidationError(f"expected [B, C, H, W] features, got {tuple(z.shape)}")
    b, c, h, w = z.shape
    padded = F.pad(z, (1, 1, 1, 1), mode="replicate")
    norm = z.norm(dim=1)
    zero_count = int((norm <= _ZERO_NORM_EPS).sum())
    if zero_count:
        log.debug("neighbor_similarity: %d zero-norm feature vectors -> similarity 0", zero_count)
    sims = []
    for dy, dx in NEIGHBOR_OFFSETS:
        nb = padded[:, :, 1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        dot = (z * nb).sum(dim=1)
        denom = norm * nb.norm(dim=1)
        cos = dot / denom.clamp_min(_ZERO_NORM_EPS)
        cos = torch.where(denom > _ZERO_NORM_EPS, cos, torch.zeros_like(cos))
        sims.append(cos)
    return torch.stack(sims, dim=1).clamp(-1.0, 1.0)


class OffsetGenerator(nn.Module):
    """Predict per-group resampling offsets from fused features + similarity.

    direction = Conv3x3(concat(Z, S)); magnitude = sigmoid(Conv3x3(concat(Z, S)));
    offsets = direction * magnitude, shaped [B, 2G, H, W].
    """

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.direction = nn.Conv2d(channels + 8, 2 * groups, 3, padding=1)
        self.magnitude = nn.Conv2d(channels + 8, 2 * groups, 3, padding=1)

    def forward(self, z: torch.Tensor, similarity: torch.Tensor):
        if similarity.shape[1] != 8 or similarity.shape[2:] != z.shape[2:]:
            raise ValidationError(
                f"similarity shape {tuple(similarity.shape)} does not match features "
                f"{tuple(z.shape)}"
            )
        x = torch.cat([z, similarity], dim=1)
        d = self.direction(x)
        a = torch.sigmoid(self.magnitude(x))
        return d, a, d * a


def resample_features(feat: torch.Tensor, offsets: torch.Tensor, groups: int) -> torch.Tensor:
    """Bilinearly re-read each channel group at its offset locations.

    Group g reads position (i + offsets[2g], j + offsets[2g+1]); sampling
    coordinates are clamped to the grid, so out-of-range offsets hit the
    border pixels. Zero offsets reproduce the input exactly.
    """
    b, c, h, w = feat.shape
    if c % groups != 0:
        raise ValidationError(f"channels {c} not divisible by groups {groups}")
    if offsets.shape != (b, 2 * groups, h, w):
        raise ValidationError(
            f"offsets must be [B, {2 * groups}, H, W], got {tuple(offsets.shape)}"
        )
    cg = c // groups
    f = feat.reshape(b, groups, cg, h * w)
    off = offsets.reshape(b, groups, 2, h, w)
    rows = torch.arange(h, dtype=feat.dtype, device=feat.device).view(1, 1, h, 1)
    cols = torch.arange(w, dtype=feat.dtype, device=feat.device).view(1, 1, 1, w)
    # clamp bounds +-inf offsets; NaN (diverged weights) reads index 0 and is
    # still surfaced through the NaN feature values themselves
    pr = torch.nan_to_num((rows + off[:, :, 0]).clamp(0, h - 1), nan=0.0)
    pc = torch.nan_to_num((cols + off[:, :, 1]).clamp(0, w - 1), nan=0.0)
    r0 = pr.floor()
    c0 = pc.floor()
    fr = (pr - r0).unsqueeze(2)
    fc = (pc - c0).unsqueeze(2)
    r0 = r0.long()
    c0 = c0.long()
    r1 = (r0 + 1).clamp(max=h - 1)
    c1 = (c0 + 1).clamp(max=w - 1)

    def gather(ri: torch.Tensor, ci: torch.Tensor) -> torch.Tensor:
        idx = (ri * w + ci).reshape(b, groups, 1, h * w).expand(b, groups, cg, h * w)
        return f.gather(3, idx).reshape(b, groups, cg, h, w)

    v00 = gather(r0, c0)
    v01 = gather(r0, c1)
    v10 = gather(r1, c0)
    v11 = gather(r1, c1)
    out = (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11)
    return out.reshape(b, c, h, w)


class ChannelGate(nn.Module):
    """Squeeze-excite channel attention; gates are sigmoid, strictly in (0, 1)."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(channels // reduction, 4)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.force_identity = False  # ablation hook: skip gating entirely

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.force_identity:
            return x
        g = torch.sigmoid(self.fc2(F.gelu(self.fc1(x.mean(dim=(2, 3))))))
        return x * g[:, :, None, None]


class AdaptiveFusion(nn.Module):
    """Concat -> channel attention -> fusing conv -> offset resampling."""

    def __init__(self, in_channels: int, fused_channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.gate = ChannelGate(in_channels)
        self.fuse_conv = nn.Conv2d(in_channels, fused_channels, 3, padding=1)
        self.offset_gen = OffsetGenerator(fused_channels, groups)

    def forward(self, features: list[torch.Tensor]) -> FusionTensors:
        target_hw = features[-1].shape[2:]
        aligned = [
            f if f.shape[2:] == target_hw
            else F.interpolate(f, size=target_hw, mode="bilinear", align_corners=False)
            for f in features
        ]
        x = torch.cat(aligned, dim=1)
        z = self.fuse_conv(self.gate(x))
        s = neighbor_similarity(z)
        d, a, o = self.offset_gen(z, s)
        out = resample_features(z, o, self.groups)
        return FusionTensors(z=z, similarity=s, direction=d, magnitude=a, offsets=o, out=out)
