"""The dual-path segmentation network.

A multi-scale transformer backbone captures large-scale context while a
fixed-resolution spatial branch preserves the fine structure that heavy
rainfall lives in. Adaptive fusion aligns and merges the two streams; an
upsampling decoder emits per-pixel class logits at input resolution, and
a light head on the spatial branch emits auxiliary logits for deep
supervision.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError, ValidationError
from .blocks import EncoderStage, UpBlock
from .config import ModelConfig
from .fusion import AdaptiveFusion, FusionTensors


@dataclass
class LogitsField:
    """Full-resolution class logits from the main and auxiliary heads."""

    main_logits: torch.Tensor
    spatial_logits: torch.Tensor | None = None


class Decoder(nn.Module):
    """Project to the decoder width, then upsample back to full resolution."""

    def __init__(self, in_dim: int, dims: tuple[int, ...], num_classes: int):
        super().__init__()
        self.pre = nn.Conv2d(in_dim, dims[0], 3, padding=1)
        self.ups = nn.ModuleList(UpBlock(dims[i], dims[i + 1]) for i in range(len(dims) - 1))
        self.head = nn.Conv2d(dims[-1], num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.pre(x))
        for up in self.ups:
            x = up(x)
        return self.head(x)


class DualPathSegmenter(nn.Module):
    """Segmentation model with selectable architecture (dual/backbone/hrf)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        arch = cfg.architecture

        if arch in ("dual", "backbone"):
            stages = []
            in_ch = cfg.in_channels
            for st in cfg.backbone_stages:
                stages.append(
                    EncoderStage(in_ch, st.embed_dim, st.depth, st.num_heads,
                                 st.downsample, st.sr_ratio, cfg.ffn_expansion)
                )
                in_ch = st.embed_dim
            self.backbone = nn.ModuleList(stages)

        if arch in ("dual", "hrf"):
            self.spatial = EncoderStage(
                cfg.in_channels, cfg.spatial_branch_dim, cfg.spatial_branch_depth,
                num_heads=1, stride=cfg.spatial_resolution_factor,
                sr_ratio=1, expansion=cfg.ffn_expansion,
            )

        if arch == "dual":
            concat_dim = sum(s.embed_dim for s in cfg.backbone_stages) + cfg.spatial_branch_dim
            self.fusion = AdaptiveFusion(concat_dim, cfg.decoder_dims[0], cfg.fusion_groups)
            self.aux_head = nn.Sequential(
                nn.Conv2d(cfg.spatial_branch_dim, cfg.spatial_branch_dim, 3, padding=1),
                nn.GELU(),
                nn.Conv2d(cfg.spatial_branch_dim, cfg.num_classes, 1),
            )
            decoder_in = cfg.decoder_dims[0]
        elif arch == "backbone":
            decoder_in = sum(s.embed_dim for s in cfg.backbone_stages)
        else:  # hrf
            decoder_in = cfg.spatial_branch_dim
        self.decoder = Decoder(decoder_in, cfg.decoder_dims, cfg.num_classes)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValidationError(
                f"expected [B, {self.cfg.in_channels}, H, W] input, got {tuple(x.shape)}"
            )
        stride = max(self.cfg.total_stride, self.cfg.spatial_resolution_factor)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ConfigError(
                f"input dims {tuple(x.shape[2:])} not divisible by total stride {stride}"
            )

    def forward_backbone(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Multi-scale feature maps, one per stage."""
        self._check_input(x)
        feats = []
        for stage in self.backbone:
            x = stage(x)
            feats.append(x)
        return feats

    def forward_spatial(self, x: torch.Tensor) -> torch.Tensor:
        """Fixed-resolution feature map at stride spatial_resolution_factor."""
        self._check_input(x)
        return self.spatial(x)

    def fuse(self, backbone_feats: list[torch.Tensor], spatial_feat: torch.Tensor) -> FusionTensors:
        """Merge the streams at the spatial branch's resolution."""
        return self.fusion(list(backbone_feats) + [spatial_feat])

    def forward(self, x: torch.Tensor) -> LogitsField:
        arch = self.cfg.architecture
        full_hw = x.shape[2:]
        if arch == "dual":
            backbone_feats = self.forward_backbone(x)
            spatial_feat = self.forward_spatial(x)
            fused = self.fuse(backbone_feats, spatial_feat)
            main = self.decoder(fused.out)
            aux = self.aux_head(spatial_feat)
            if aux.shape[2:] != full_hw:
                aux = F.interpolate(aux, size=full_hw, mode="bilinear", align_corners=False)
            return LogitsField(main_logits=main, spatial_logits=aux)
        if arch == "backbone":
            feats = self.forward_backbone(x)
            target_hw = feats[0].shape[2:]
            aligned = [
                f if f.shape[2:] == target_hw
                else F.interpolate(f, size=target_hw, mode="bilinear", align_corners=False)
                for f in feats
            ]
            return LogitsField(main_logits=self.decoder(torch.cat(aligned, dim=1)))
        # hrf: the fixed-resolution encoder alone
        return LogitsField(main_logits=self.decoder(self.forward_spatial(x)))

    def penultimate_features(self, x: torch.Tensor, branch: str = "fused") -> torch.Tensor:
        """Embedding maps for feature-quality probes.

        branch: "fused" (pre-decoder fused features), "backbone" (finest
        backbone stage, upsampled), or "spatial" (spatial-branch output).
        """
        arch = self.cfg.architecture
        if branch == "spatial" or arch == "hrf":
            return self.forward_spatial(x)
        if branch == "backbone" or arch == "backbone":
            return self.forward_backbone(x)[0]
        fused = self.fuse(self.forward_backbone(x), self.forward_spatial(x))
        return fused.out

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def zero_offsets_(model: DualPathSegmenter) -> None:
    """Zero the offset generator (weights and biases) so resampling is identity."""
    gen = model.fusion.offset_gen
    for conv in (gen.direction, gen.magnitude):
        nn.init.zeros_(conv.weight)
        nn.init.zeros_(conv.bias)
