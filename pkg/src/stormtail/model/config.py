"""Model architecture configuration and presets."""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import ConfigError

ARCHITECTURES = ("dual", "backbone", "hrf")


@dataclass(frozen=True)
class StageConfig:
    """One multi-scale encoder stage."""

    embed_dim: int
    depth: int
    num_heads: int
    downsample: int  # stride of this stage's patch embedding
    sr_ratio: int = 1  # key/value spatial reduction inside attention

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"stage depth must be >= 1, got {self.depth}")
        if self.embed_dim < 1 or self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be positive and divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ConfigError(f"downsample must be a power of two, got {self.downsample}")
        if self.sr_ratio < 1:
            raise ConfigError(f"sr_ratio must be >= 1, got {self.sr_ratio}")


@dataclass(frozen=True)
class ModelConfig:
    """Dual-path segmentation model configuration.

    ``architecture`` selects the variant: "dual" (multi-scale backbone +
    fixed-resolution spatial branch + adaptive fusion), "backbone" (the
    multi-scale encoder alone), or "hrf" (the fixed-resolution encoder
    alone). Fusion happens at the spatial branch's resolution; backbone
    features are upsampled bilinearly to meet it. ``decoder_dims[0]`` is
    the fused channel count and must be divisible by ``fusion_groups``.
    """

    in_channels: int = 27
    num_classes: int = 6
    backbone_stages: tuple[StageConfig, ...] = (
        StageConfig(16, 1, 1, 2),
        StageConfig(32, 1, 2, 2),
    )
    spatial_branch_dim: int = 16
    spatial_branch_depth: int = 1
    spatial_resolution_factor: int = 2
    fusion_groups: int = 4
    decoder_dims: tuple[int, ...] = (32, 16)
    ffn_expansion: int = 4
    architecture: str = "dual"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if not self.backbone_stages:
            raise ConfigError("need at least one backbone stage")
        stages = tuple(
            s if isinstance(s, StageConfig) else StageConfig(*s) for s in self.backbone_stages
        )
        object.__setattr__(self, "backbone_stages", stages)
        object.__setattr__(self, "decoder_dims", tuple(self.decoder_dims))
        f = self.spatial_resolution_factor
        if f < 1 or (f & (f - 1)) != 0:
            raise ConfigError(f"spatial_resolution_factor must be a power of two, got {f}")
        if f > stages[0].downsample:
            raise ConfigError(
                f"spatial_resolution_factor {f} exceeds the first backbone "
                f"downsample factor {stages[0].downsample}"
            )
        if self.spatial_branch_depth < 1 or self.spatial_branch_dim < 1:
            raise ConfigError("spatial branch needs positive depth and width")
        if self.fusion_groups < 1:
            raise ConfigError("fusion_groups must be >= 1")
        if self.decoder_dims[0] % self.fusion_groups != 0:
            raise ConfigError(
                f"fused channel count {self.decoder_dims[0]} not divisible by "
                f"fusion_groups {self.fusion_groups}"
            )
        ups = {"dual": f, "hrf": f, "backbone": stages[0].downsample}[self.architecture]
        n_up = ups.bit_length() - 1
        if len(self.decoder_dims) != n_up + 1:
            raise ConfigError(
                f"decoder needs {n_up + 1} dims to reach full resolution from "
                f"stride {ups}, got {len(self.decoder_dims)}"
            )

    @property
    def cumulative_strides(self) -> tuple[int, ...]:
        out, s = [], 1
        for st in self.backbone_stages:
            s *= st.downsample
            out.append(s)
        return tuple(out)

    @property
    def total_stride(self) -> int:
        return self.cumulative_strides[-1]


def toy_config(in_channels: int = 27, **overrides) -> ModelConfig:
    """Smallest config that exercises every pathway; fits an 8x8 input."""
    base = dict(
        in_channels=in_channels,
        backbone_stages=(StageConfig(8, 1, 1, 2), StageConfig(16, 1, 2, 2)),
        spatial_branch_dim=8,
        spatial_branch_depth=1,
        spatial_resolution_factor=2,
        fusion_groups=2,
        decoder_dims=(16, 8),
    )
    base.update(overrides)
    return ModelConfig(**base)


def synthetic_config(in_channels: int = 27, **overrides) -> ModelConfig:
    """Default config for the 32x32 synthetic benchmark."""
    base = dict(
        in_channels=in_channels,
        backbone_stages=(StageConfig(16, 1, 1, 4), StageConfig(32, 1, 2, 2)),
        spatial_branch_dim=16,
        spatial_branch_depth=1,
        spatial_resolution_factor=2,
        fusion_groups=4,
        decoder_dims=(32, 16),
    )
    base.update(overrides)
    return ModelConfig(**base)


def reference_config(in_channels: int = 27, **overrides) -> ModelConfig:
    """Full-scale reference: b0-style multi-scale encoder for 64x64 grids."""
    base = dict(
        in_channels=in_channels,
        backbone_stages=(
            StageConfig(32, 2, 1, 4, sr_ratio=8),
            StageConfig(64, 2, 2, 2, sr_ratio=4),
            StageConfig(160, 2, 5, 2, sr_ratio=2),
            StageConfig(256, 2, 8, 2, sr_ratio=1),
        ),
        spatial_branch_dim=320,
        spatial_branch_depth=6,
        spatial_resolution_factor=4,
        fusion_groups=4,
        decoder_dims=(320, 256, 128),
    )
    base.update(overrides)
    return ModelConfig(**base)
