"""
Image representation, patch gridding, PNG I/O and quality metrics.

Images are HWC float arrays in [0, 1]. Network code works on NCHW tensors;
`to_tensor` / `to_image` convert between the two layouts.
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage
from skimage.metrics import structural_similarity

from m2net.errors import DimensionError, ImageFormatError

logger = logging.getLogger("m2net.imaging")

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass
class PatchGrid:
    """Row-major tiling of an HWC feature map into flattened l x l patches."""
    patches: torch.Tensor  # [R, l*l*C]
    grid_rows: int
    grid_cols: int
    patch_len: int
    channels: int
    height: int  # Pre-padding size, restored on assembly
    width: int

    @property
    def count(self) -> int:
        return self.grid_rows * self.grid_cols

    def validate(self) -> None:
        """Raise DimensionError if the metadata does not describe `patches`."""
        expected = (self.count, self.patch_len * self.patch_len * self.channels)
        if tuple(self.patches.shape) != expected:
            raise DimensionError(
                f"patch grid holds {tuple(self.patches.shape)}, metadata expects {expected}"
            )
        if self.height > self.grid_rows * self.patch_len or self.width > self.grid_cols * self.patch_len:
            raise DimensionError(
                f"image size {self.height}x{self.width} exceeds grid coverage "
                f"{self.grid_rows * self.patch_len}x{self.grid_cols * self.patch_len}"
            )


# ===== Layout helpers =====

def pad_reflect(x: torch.Tensor, pads: Tuple[int, int, int, int]) -> torch.Tensor:
    """
    Pad an NCHW tensor by (left, right, top, bottom).

    Reflect padding needs each pad to be smaller than the padded dimension;
    maps too small for that (deep dilated layers at desk scale) fall back to
    replicate padding.
    """
    if not any(pads):
        return x
    left, right, top, bottom = pads
    height, width = x.shape[-2:]
    if max(left, right) < width and max(top, bottom) < height:
        return F.pad(x, pads, mode="reflect")
    return F.pad(x, pads, mode="replicate")


def pad_to_multiple(x: torch.Tensor, multiple: int) -> Tuple[torch.Tensor, Tuple[int, int]]:
    """Reflect-pad an NCHW tensor on the bottom/right up to a multiple; returns the original size."""
    height, width = x.shape[-2:]
    pad_h = (-height) % multiple
    pad_w = (-width) % multiple
    return pad_reflect(x, (0, pad_w, 0, pad_h)), (height, width)


def to_tensor(img: ArrayLike) -> torch.Tensor:
    """HWC image -> [1, C, H, W] float32 tensor."""
    t = torch.as_tensor(np.asarray(img, dtype=np.float32))
    if t.ndim != 3:
        raise DimensionError(f"expected an HWC image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1).unsqueeze(0).contiguous()


def to_image(t: torch.Tensor) -> np.ndarray:
    """[1, C, H, W] or [C, H, W] tensor -> HWC float32 array."""
    t = t.detach().cpu()
    if t.ndim == 4:
        if t.shape[0] != 1:
            raise DimensionError(f"expected a single image, got batch of {t.shape[0]}")
        t = t[0]
    if t.ndim != 3:
        raise DimensionError(f"expected a CHW tensor, got shape {tuple(t.shape)}")
    return t.permute(1, 2, 0).numpy().astype(np.float32)


# ===== Patch gridding =====

def extract_patches(feat: ArrayLike, l: int, pad: bool = False) -> PatchGrid:
    """
    Tile an HWC feature map into non-overlapping l x l patches.

    Args:
        feat: array [H, W, C]
        l: patch side length
        pad: reflect-pad up to the next multiple of l instead of failing

    Returns:
        PatchGrid with patches in row-major order; each patch is flattened
        in (row, col, channel) order.

    Raises:
        DimensionError: if H or W is not divisible by l and pad is False
    """
    x = torch.as_tensor(feat)
    if x.ndim != 3:
        raise DimensionError(f"expected an HWC feature map, got shape {tuple(x.shape)}")
    if l < 1:
        raise DimensionError(f"patch length must be positive, got {l}")
    height, width, channels = x.shape

    if height % l or width % l:
        if not pad:
            raise DimensionError(f"feature map {height}x{width} is not divisible by patch length {l}")
        nchw = x.permute(2, 0, 1).unsqueeze(0)
        nchw = pad_reflect(nchw, (0, (-width) % l, 0, (-height) % l))
        x = nchw[0].permute(1, 2, 0)

    rows, cols = x.shape[0] // l, x.shape[1] // l
    patches = (
        x.reshape(rows, l, cols, l, channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(rows * cols, l * l * channels)
    )
    return PatchGrid(
        patches=patches,
        grid_rows=rows,
        grid_cols=cols,
        patch_len=l,
        channels=channels,
        height=height,
        width=width,
    )


def assemble_patches(grid: PatchGrid) -> torch.Tensor:
    """Inverse of extract_patches: rebuild the [H, W, C] map and crop any padding."""
    grid.validate()
    l = grid.patch_len
    full = (
        grid.patches.reshape(grid.grid_rows, grid.grid_cols, l, l, grid.channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(grid.grid_rows * l, grid.grid_cols * l, grid.channels)
    )
    return full[: grid.height, : grid.width]


# ===== Metrics =====

def _as_pair(a: ArrayLike, b: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes must match: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: ArrayLike, b: ArrayLike) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1], capped at 100 dB."""
    a, b = _as_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


def ssim(a: ArrayLike, b: ArrayLike) -> float:
    """
    Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Uses C1 = 0.01^2 and C2 = 0.03^2 for data range 1, population
    covariances, and averages over channels for HWC inputs.

    Raises:
        DimensionError: on shape mismatch or images smaller than the window
    """
    a, b = _as_pair(a, b)
    if a.ndim not in (2, 3):
        raise DimensionError(f"expected HW or HWC images, got {a.ndim} dimensions")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionError(
            f"image {a.shape[0]}x{a.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    value = structural_similarity(
        a,
        b,
        data_range=1.0,
        gaussian_weights=True,
        sigma=SSIM_SIGMA,
        use_sample_covariance=False,
        channel_axis=-1 if a.ndim == 3 else None,
    )
    return float(min(1.0, max(-1.0, value)))


def mask_iou(pred: ArrayLike, target: ArrayLike) -> float:
    """Intersection over union of two binary masks; two empty masks score 1."""
    pred, target = _as_pair(pred, target)
    pred, target = pred > 0.5, target > 0.5
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


# ===== PNG I/O =====

def _has_16_bit_samples(img: PILImage.Image) -> bool:
    # 48-bit PNGs open as mode RGB; only the decoder rawmode (e.g. "RGB;16B") shows the depth
    return any(";16" in str(tile[3]) for tile in (img.tile or []))


def load_image(path: Union[str, Path]) -> np.ndarray:
    """
    Load an 8-bit RGB PNG as an HWC float32 array with values v/255.

    Raises:
        FileNotFoundError: if the file does not exist
        ImageFormatError: for 16-bit data or a channel count other than 3
    """
    path = Path(path)
    with PILImage.open(path) as img:
        mode = img.mode
        if _has_16_bit_samples(img):
            raise ImageFormatError(f"{path}: expected 8-bit channels, got 16-bit samples")
        if mode.startswith("I") or mode == "F":
            raise ImageFormatError(f"{path}: expected 8-bit channels, got mode {mode}")
        if mode != "RGB":
            raise ImageFormatError(f"{path}: expected 3 channels (RGB), got mode {mode}")
        data = np.asarray(img, dtype=np.uint8)
    return data.astype(np.float32) / 255.0


def save_image(img: ArrayLike, path: Union[str, Path]) -> None:
    """Write an HWC image in [0, 1] as an 8-bit RGB PNG (round then clamp)."""
    arr = np.asarray(img.detach().cpu() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionError(f"expected an HxWx3 image, got shape {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(Path(path), format="PNG")


def load_mask(path: Union[str, Path]) -> np.ndarray:
    """Load a single-channel 8-bit PNG mask as an HW float32 array of {0, 1}."""
    path = Path(path)
    with PILImage.open(path) as img:
        if img.mode not in ("L", "1"):
            raise ImageFormatError(f"{path}: expected a single-channel 8-bit mask, got mode {img.mode}")
        data = np.asarray(img.convert("L"), dtype=np.uint8)
    return (data > 127).astype(np.float32)


def save_mask(mask: ArrayLike, path: Union[str, Path]) -> None:
    """Write a binary HW mask as a single-channel PNG with values {0, 255}."""
    arr = np.asarray(mask.detach().cpu() if isinstance(mask, torch.Tensor) else mask)
    if arr.ndim != 2:
        raise DimensionError(f"expected an HxW mask, got shape {arr.shape}")
    data = np.where(arr > 0.5, 255, 0).astype(np.uint8)
    PILImage.fromarray(data).save(Path(path), format="PNG")
