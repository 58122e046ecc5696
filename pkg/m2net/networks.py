"""
Convolution building blocks, the coarse and refine removal generators and the
HF-conditioned patch discriminator.

Gated convolution follows the free-form inpainting formulation:
out = act(feature_conv(x)) * sigmoid(gate_conv(x)).
"""
import logging
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from m2net.cha import ContextualHighlightAttention
from m2net.errors import DimensionError
from m2net.imaging import pad_reflect

logger = logging.getLogger("m2net.networks")

GENERATOR_WIDTHS = (32, 64)
DILATIONS = (2, 4, 8, 16)
DISCRIMINATOR_WIDTHS = (32, 64, 128, 128)
HEAD_INIT_STD = 1e-3


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.ndim != 4 or x.shape[1] != expected:
        raise DimensionError(f"{where}: expected [N, {expected}, H, W] input, got {tuple(x.shape)}")


class ReflectConv2d(nn.Conv2d):
    """Conv2d with 'same' reflect padding for odd kernels (stride-aware)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, dilation=1, bias=True):
        super().__init__(in_channels, out_channels, kernel_size, stride=stride, padding=0,
                         dilation=dilation, bias=bias)
        self.pad_amount = dilation * (kernel_size - 1) // 2

    def forward(self, x):
        p = self.pad_amount
        return super().forward(pad_reflect(x, (p, p, p, p)))


class GatedConv2d(nn.Module):
    """
    Gated 2D convolution with reflect padding.

    The feature path and the gate path share kernel size, stride and
    dilation. Output spatial size is ceil(H / stride).
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, dilation=1, activation="elu"):
        super().__init__()
        if dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {dilation}")
        self.in_channels = in_channels
        self.conv_feat = ReflectConv2d(in_channels, out_channels, kernel_size, stride=stride, dilation=dilation)
        self.conv_gate = ReflectConv2d(in_channels, out_channels, kernel_size, stride=stride, dilation=dilation)
        if activation == "elu":
            self.activation = nn.ELU()
        elif activation == "lrelu":
            self.activation = nn.LeakyReLU(0.2)
        elif activation == "none":
            self.activation = None
        else:
            raise ValueError(f"Unsupported activation: {activation}")

    def forward(self, x):
        _check_channels(x, self.in_channels, "gated_conv")
        feat = self.conv_feat(x)
        if self.activation is not None:
            feat = self.activation(feat)
        gate = torch.sigmoid(self.conv_gate(x))
        return feat * gate


class UpsampleGatedConv2d(nn.Module):
    """Nearest-neighbour x2 upsampling followed by a gated convolution."""

    def __init__(self, in_channels, out_channels, kernel_size=3):
        super().__init__()
        self.gated_conv = GatedConv2d(in_channels, out_channels, kernel_size)

    def forward(self, x):
        return self.gated_conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class RemovalGenerator(nn.Module):
    """
    One removal stage: encoder (2 stride-2 gated blocks), dilated gated blocks,
    optional contextual highlight attention, decoder (2 upsampling blocks) and
    an output head.

    The head predicts an additive correction to the stage input, clamped to
    [0, 1]. Its weights start near zero, so an untrained stage is close to
    the identity, and the gradient does not vanish on saturated highlights.
    """

    def __init__(self, in_channels: int = 6, with_attention: bool = False, patch_len: int = 2):
        super().__init__()
        w1, w2 = GENERATOR_WIDTHS
        self.in_channels = in_channels
        self.encoder = nn.Sequential(
            GatedConv2d(in_channels, w1, 3, stride=2),
            GatedConv2d(w1, w2, 3, stride=2),
        )
        self.dilated = nn.Sequential(*[GatedConv2d(w2, w2, 3, dilation=d) for d in DILATIONS])
        self.attention = ContextualHighlightAttention(w2, patch_len) if with_attention else None
        self.decoder = nn.Sequential(
            UpsampleGatedConv2d(w2, w1),
            UpsampleGatedConv2d(w1, w1),
        )
        self.head = ReflectConv2d(w1, 3, 3)
        nn.init.normal_(self.head.weight, std=HEAD_INIT_STD)
        nn.init.zeros_(self.head.bias)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Bottleneck features after the dilated blocks."""
        return self.dilated(self.encoder(x))

    def decode(self, feat: torch.Tensor, base: torch.Tensor) -> torch.Tensor:
        """Decode bottleneck features into a [0, 1] image correcting `base`."""
        correction = self.head(self.decoder(feat))
        return torch.clamp(base + correction, 0.0, 1.0)

    def forward(self, base: torch.Tensor, hf: torch.Tensor, mask: Optional[torch.Tensor] = None,
                use_cha: bool = True, use_ha: bool = True, use_ba: bool = True) -> torch.Tensor:
        if base.shape != hf.shape:
            raise DimensionError(f"image {tuple(base.shape)} and highlight feature {tuple(hf.shape)} differ")
        x = torch.cat([base, hf], dim=1)
        _check_channels(x, self.in_channels, "removal generator")
        height, width = x.shape[-2:]
        if height % 4 or width % 4:
            raise DimensionError(f"generator input {height}x{width} must be divisible by 4")

        feat = self.features(x)
        if self.attention is not None and use_cha:
            if mask is None:
                raise DimensionError("contextual attention needs a highlight mask")
            # Downsample the full-resolution mask to the bottleneck grid
            small_mask = F.max_pool2d(mask, kernel_size=4, stride=4)
            feat = self.attention(feat, small_mask, use_ha=use_ha, use_ba=use_ba)
        return self.decode(feat, base)


class PatchDiscriminator(nn.Module):
    """
    HF-conditioned patch discriminator: 4 stride-2 spectral-normalized
    convolutions and a linear per-location score head.
    """

    def __init__(self, in_channels: int = 6, power_iter: int = 1):
        super().__init__()
        self.in_channels = in_channels
        layers = []
        prev = in_channels
        for width in DISCRIMINATOR_WIDTHS:
            layers.append(nn.utils.spectral_norm(
                nn.Conv2d(prev, width, 5, stride=2, padding=2),
                n_power_iterations=power_iter,
            ))
            layers.append(nn.LeakyReLU(0.2))
            prev = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, 1, 1)

    def forward(self, img: torch.Tensor, hf: torch.Tensor) -> torch.Tensor:
        if img.shape != hf.shape:
            raise DimensionError(f"image {tuple(img.shape)} and highlight feature {tuple(hf.shape)} differ")
        x = torch.cat([img, hf], dim=1)
        _check_channels(x, self.in_channels, "discriminator")
        return self.head(self.body(x))


# ===== Functional surface =====

def gated_conv(x: torch.Tensor, layer: GatedConv2d) -> torch.Tensor:
    """Apply a gated convolution layer."""
    return layer(x)


def coarse_remove(img: torch.Tensor, hf: torch.Tensor, generator: RemovalGenerator) -> torch.Tensor:
    """Coarse highlight-free image D_1 from the input image and its highlight feature."""
    return generator(img, hf)


def refine_remove(d1: torch.Tensor, hf: torch.Tensor, generator: RemovalGenerator,
                  mask: Optional[torch.Tensor] = None, use_cha: bool = True,
                  use_ha: bool = True, use_ba: bool = True) -> torch.Tensor:
    """Refined highlight-free image D_2 from D_1, the highlight feature and the binarized mask."""
    return generator(d1, hf, mask=mask, use_cha=use_cha, use_ha=use_ha, use_ba=use_ba)


def discriminate(img: torch.Tensor, hf: torch.Tensor, discriminator: PatchDiscriminator) -> torch.Tensor:
    """Score map of shape [N, 1, ceil(H/16), ceil(W/16)]."""
    return discriminator(img, hf)
