"""
Highlight Feature Extractor.

A residual backbone produces a 4-level pyramid whose level u has spatial size
(H / 2^(u-1)) x (W / 2^(u-1)). A top-down pass upsamples each deeper level
(nearest x2 followed by a convolution with M filters), adds it to the lateral
features and fuses the sum with a convolution of K filters. The finest fused
map is projected to 3 highlight channels and squashed with a sigmoid, giving
per-channel highlight intensity coefficients in [0, 1].
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from m2net.errors import DimensionError
from m2net.imaging import pad_to_multiple
from m2net.networks import ReflectConv2d

logger = logging.getLogger("m2net.hfe")

LEVEL_WIDTHS = (16, 32, 64, 128)
PYRAMID_LEVELS = len(LEVEL_WIDTHS)
HIGHLIGHT_CHANNELS = 3
MIN_SIZE = 2 ** (PYRAMID_LEVELS - 1)


@dataclass
class FeaturePyramid:
    """Backbone feature maps, finest first; `height`/`width` is the unpadded input size."""
    levels: List[torch.Tensor]
    height: int
    width: int

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise DimensionError(f"pyramid must have {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        for finer, coarser in zip(self.levels, self.levels[1:]):
            fh, fw = finer.shape[-2:]
            ch, cw = coarser.shape[-2:]
            if (fh, fw) != (2 * ch, 2 * cw):
                raise DimensionError(f"pyramid level {ch}x{cw} does not halve {fh}x{fw}")

    def sizes(self) -> List[int]:
        """Spatial heights of all levels."""
        return [level.shape[-2] for level in self.levels]


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a projection shortcut; the first one carries the stride."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = ReflectConv2d(in_channels, out_channels, 3, stride=stride)
        self.conv2 = ReflectConv2d(out_channels, out_channels, 3)
        self.act = nn.ELU()
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1, stride=stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.conv2(self.act(self.conv1(x)))
        return self.act(out + self.shortcut(x))


class HighlightFeatureExtractor(nn.Module):
    """Multi-scale highlight detector producing HF in [0, 1]^3 per pixel."""

    def __init__(self, widths: Sequence[int] = LEVEL_WIDTHS):
        super().__init__()
        if len(widths) != PYRAMID_LEVELS:
            raise ValueError(f"need {PYRAMID_LEVELS} level widths, got {len(widths)}")
        self.widths = tuple(widths)
        self.stem = ReflectConv2d(3, widths[0], 3)
        self.stages = nn.ModuleList(
            [ResidualBlock(widths[0], widths[0], stride=1)]
            + [ResidualBlock(widths[u - 1], widths[u], stride=2) for u in range(1, PYRAMID_LEVELS)]
        )
        # W_j: upsampling filters from level u+1 into level u (M = width of level u)
        self.upsample_convs = nn.ModuleList(
            [ReflectConv2d(widths[u + 1], widths[u], 3) for u in range(PYRAMID_LEVELS - 1)]
        )
        # W_k: fusion filters applied to lateral + upsampled features (K = width of level u)
        self.fuse_convs = nn.ModuleList(
            [ReflectConv2d(widths[u], widths[u], 3) for u in range(PYRAMID_LEVELS - 1)]
        )
        self.head = nn.Conv2d(widths[0], HIGHLIGHT_CHANNELS, 1)

    def pyramid(self, img: torch.Tensor) -> FeaturePyramid:
        if img.ndim != 4 or img.shape[1] != 3:
            raise DimensionError(f"expected [N, 3, H, W] image, got {tuple(img.shape)}")
        height, width = img.shape[-2:]
        if height < MIN_SIZE or width < MIN_SIZE:
            raise DimensionError(f"image {height}x{width} is smaller than {MIN_SIZE}x{MIN_SIZE}")
        x, _ = pad_to_multiple(img, MIN_SIZE)

        levels = []
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return FeaturePyramid(levels=levels, height=height, width=width)

    def fuse(self, pyr: FeaturePyramid) -> torch.Tensor:
        for u, (level, width) in enumerate(zip(pyr.levels, self.widths)):
            if level.shape[1] != width:
                raise DimensionError(f"pyramid level {u + 1} has {level.shape[1]} channels, expected {width}")

        top = pyr.levels[-1]
        for u in reversed(range(PYRAMID_LEVELS - 1)):
            up = self.upsample_convs[u](F.interpolate(top, scale_factor=2, mode="nearest"))
            top = self.fuse_convs[u](pyr.levels[u] + up)
        hf = torch.sigmoid(self.head(top))
        return hf[..., : pyr.height, : pyr.width]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.pyramid(img))


def backbone_pyramid(img: torch.Tensor, extractor: HighlightFeatureExtractor) -> FeaturePyramid:
    """4-level feature pyramid with spatial sizes H, H/2, H/4, H/8 (after reflect-padding to a multiple of 8)."""
    return extractor.pyramid(img)


def upsample_fuse(pyr: FeaturePyramid, extractor: HighlightFeatureExtractor) -> torch.Tensor:
    """Top-down fusion of a pyramid into the [N, 3, H, W] highlight feature."""
    return extractor.fuse(pyr)


def detect(img: torch.Tensor, extractor: HighlightFeatureExtractor) -> torch.Tensor:
    """Highlight feature HF of an [N, 3, H, W] image, values in [0, 1]."""
    return extractor(img)


def binarize_mask(hf: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """
    Binary highlight mask [N, 1, H, W]: 1 where the channel mean of HF exceeds tau.

    The comparison is strict, so a channel mean equal to tau maps to 0.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return (hf.mean(dim=1, keepdim=True) > tau).to(hf.dtype)
