"""Adversarial, content, perceptual and weighted removal losses."""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from m2net.config import settings
from m2net.errors import DimensionError
from m2net.schemas import LossWeights

logger = logging.getLogger("m2net.losses")

Scalar = Union[float, torch.Tensor]

PERCEPTUAL_WIDTHS = (16, 32, 64)


class PerceptualExtractor(nn.Module):
    """
    Fixed-weight 3-block convolutional feature stack, tapped after each block.

    Weights are drawn from a private generator seeded with `seed` and stored
    as buffers, so the stack is bit-stable across runs and is never trained.
    """

    def __init__(self, seed: Optional[int] = None):
        super().__init__()
        self.seed = settings.PERCEPTUAL_SEED if seed is None else seed
        gen = torch.Generator().manual_seed(self.seed)
        prev = 3
        for i, width in enumerate(PERCEPTUAL_WIDTHS):
            fan_in = prev * 9
            weight = torch.randn(width, prev, 3, 3, generator=gen) * math.sqrt(2.0 / fan_in)
            self.register_buffer(f"weight{i}", weight)
            self.register_buffer(f"bias{i}", torch.zeros(width))
            prev = width

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        taps = []
        h = x - 0.5
        for i in range(len(PERCEPTUAL_WIDTHS)):
            if i > 0:
                h = F.avg_pool2d(h, 2)
            h = F.relu(F.conv2d(h, getattr(self, f"weight{i}"), getattr(self, f"bias{i}"), padding=1))
            taps.append(h)
        return taps


@dataclass
class RemovalLoss:
    """Weighted removal loss with its unweighted terms."""
    total: Scalar
    terms: Dict[str, float]


def _check_same(*tensors: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"loss inputs must share one shape, got {sorted(shapes)}")


def hinge_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Discriminator hinge loss: E[max(0, 1 - D(x))] + E[max(0, 1 + D(G(z)))]."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def gan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Generator adversarial loss -E[D(G(z))]; minimizing it raises the discriminator score."""
    return -fake_scores.mean()


def content_loss(d1: torch.Tensor, d2: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean L1 of the coarse output plus mean L1 of the refined output against GT."""
    _check_same(d1, d2, gt)
    return (d1 - gt).abs().mean() + (d2 - gt).abs().mean()


def perceptual_loss(d2: torch.Tensor, gt: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """Sum over extractor taps of the mean L1 distance between feature maps."""
    _check_same(d2, gt)
    total = d2.new_zeros(())
    for fa, fb in zip(extractor(d2), extractor(gt)):
        total = total + (fa - fb).abs().mean()
    return total


def removal_loss(l_g: Scalar, l_content: Scalar, l_per: Scalar, weights: Optional[LossWeights] = None) -> RemovalLoss:
    """
    Weighted generator objective lambda_g*L_g + lambda_content*L_content + lambda_per*L_per.

    Returns:
        RemovalLoss whose `terms` carry the unweighted values
    """
    w = weights or LossWeights()
    total = w.lambda_g * l_g + w.lambda_content * l_content + w.lambda_per * l_per
    terms = {
        "loss_g": float(l_g),
        "loss_content": float(l_content),
        "loss_per": float(l_per),
        "loss_rem": float(total),
    }
    return RemovalLoss(total=total, terms=terms)
