"""Transformer encoder blocks and the upsampling decoder unit.

Blocks follow the efficient-segmentation recipe: overlapped patch
embedding, self-attention with optional key/value spatial reduction, and
a feed-forward with a depthwise 3x3 convolution between the linear layers
(which carries the positional information, so no explicit position
encoding is needed).
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


class OverlapPatchEmbed(nn.Module):
    """Strided conv embedding with overlapping receptive fields."""

    def __init__(self, in_channels: int, embed_dim: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1 if stride > 1 else 3
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, int, int]:
        x = self.proj(x)
        _, _, h, w = x.shape
        x = x.flatten(2).transpose(1, 2)  # [B, N, C]
        return self.norm(x), h, w


class EfficientAttention(nn.Module):
    """Multi-head self-attention with spatially reduced keys/values."""

    def __init__(self, dim: int, num_heads: int, sr_ratio: int = 1):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        q = self.q(x).reshape(b, n, self.num_heads, self.head_dim).transpose(1, 2)
        if self.sr_ratio > 1:
            xr = x.transpose(1, 2).reshape(b, c, h, w)
            xr = self.sr(xr).reshape(b, c, -1).transpose(1, 2)
            xr = self.sr_norm(xr)
        else:
            xr = x
        kv = self.kv(xr).reshape(b, -1, 2, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class DWConv(nn.Module):
    """Depthwise 3x3 conv applied to token sequences."""

    def __init__(self, dim: int):
        super().__init__()
        self.dw = nn.Conv2d(dim, dim, 3, padding=1, groups=dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, n, c = x.shape
        x = x.transpose(1, 2).reshape(b, c, h, w)
        x = self.dw(x)
        return x.flatten(2).transpose(1, 2)


class MixFFN(nn.Module):
    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.dw = DWConv(hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        return self.fc2(F.gelu(self.dw(self.fc1(x), h, w)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, sr_ratio: int = 1, expansion: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientAttention(dim, num_heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFFN(dim, expansion)

    def forward(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        x = x + self.ffn(self.norm2(x), h, w)
        return x


class EncoderStage(nn.Module):
    """Patch embedding followed by a stack of transformer blocks."""

    def __init__(self, in_channels: int, dim: int, depth: int, num_heads: int,
                 stride: int, sr_ratio: int = 1, expansion: int = 4):
        super().__init__()
        self.embed = OverlapPatchEmbed(in_channels, dim, stride)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, num_heads, sr_ratio, expansion) for _ in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, h, w = self.embed(x)
        for blk in self.blocks:
            tokens = blk(tokens, h, w)
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)


class UpBlock(nn.Module):
    """Decoder unit: 2x bilinear upsample, 3x3 conv, nonlinearity."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_dim, out_dim, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return F.gelu(self.conv(x))
