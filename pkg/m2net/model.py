"""Full two-stage model: HFE -> coarse removal -> contextual attention + refine removal."""
import logging
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from m2net.hfe import MIN_SIZE, HighlightFeatureExtractor, binarize_mask
from m2net.imaging import pad_to_multiple, to_tensor
from m2net.networks import RemovalGenerator
from m2net.schemas import TrainConfig

logger = logging.getLogger("m2net.model")

NEUTRAL_HF = 0.5


class StageOutputs(NamedTuple):
    hf: torch.Tensor    # [N, 3, H, W] highlight feature
    mask: torch.Tensor  # [N, 1, H, W] binarized HF
    d1: torch.Tensor    # coarse highlight-free image
    d2: torch.Tensor    # refined highlight-free image


class M2Net(nn.Module):
    """
    Highlight removal generator with ablation switches.

    use_hfe=False replaces HF with a constant 0.5 map (which binarizes to an
    empty mask); use_cha=False skips attention in the refine stage;
    use_ha / use_ba zero the corresponding attention map.
    """

    def __init__(self, use_hfe: bool = True, use_cha: bool = True, use_ha: bool = True,
                 use_ba: bool = True, tau: float = 0.5, patch_len: int = 2):
        super().__init__()
        self.use_hfe = use_hfe
        self.use_cha = use_cha
        self.use_ha = use_ha
        self.use_ba = use_ba
        self.tau = tau
        self.hfe = HighlightFeatureExtractor()
        self.coarse = RemovalGenerator(in_channels=6)
        self.refine = RemovalGenerator(in_channels=6, with_attention=True, patch_len=patch_len)

    @classmethod
    def from_config(cls, config: TrainConfig) -> "M2Net":
        return cls(
            use_hfe=config.use_hfe,
            use_cha=config.use_cha,
            use_ha=config.use_ha,
            use_ba=config.use_ba,
            tau=config.tau,
            patch_len=config.patch_len,
        )

    def highlight_feature(self, img: torch.Tensor) -> torch.Tensor:
        if self.use_hfe:
            return self.hfe(img)
        return torch.full_like(img, NEUTRAL_HF)

    def forward(self, img: torch.Tensor) -> StageOutputs:
        padded, (height, width) = pad_to_multiple(img, MIN_SIZE)
        hf = self.highlight_feature(padded)
        mask = binarize_mask(hf, self.tau)
        d1 = self.coarse(padded, hf)
        d2 = self.refine(d1, hf, mask=mask, use_cha=self.use_cha, use_ha=self.use_ha, use_ba=self.use_ba)

        def crop(t):
            return t[..., :height, :width]
        return StageOutputs(hf=crop(hf), mask=crop(mask), d1=crop(d1), d2=crop(d2))


def infer(model: M2Net, image: np.ndarray) -> StageOutputs:
    """Run the model on one HWC image in eval mode without gradients."""
    model.eval()
    with torch.no_grad():
        return model(to_tensor(image))
