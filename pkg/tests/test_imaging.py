"""Tests for image helpers, patch gridding, metrics and PNG I/O."""
import math
import struct
import zlib

import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from m2net.errors import DimensionError, ImageFormatError
from m2net.imaging import (
    PSNR_CAP_DB,
    assemble_patches,
    extract_patches,
    load_image,
    load_mask,
    mask_iou,
    pad_reflect,
    psnr,
    save_image,
    save_mask,
    ssim,
    to_image,
    to_tensor,
)


def _write_rgb16_png(path, height=4, width=4, value=0x1234):
    """Write a 48-bit RGB PNG by hand (Pillow cannot save one)."""
    def chunk(tag, payload):
        return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload))

    row = b"\x00" + struct.pack(">H", value) * (3 * width)  # filter type 0
    header = struct.pack(">IIBBBBB", width, height, 16, 2, 0, 0, 0)
    path.write_bytes(b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
                     + chunk(b"IDAT", zlib.compress(row * height)) + chunk(b"IEND", b""))


# ── Metrics ────────────────────────────────────────────────────────────────

@pytest.mark.unit
def test_psnr_identical_images_hits_cap(random_image):
    """Test PSNR of an image against itself returns the cap."""
    assert psnr(random_image, random_image) == PSNR_CAP_DB


@pytest.mark.unit
def test_psnr_constant_offset():
    """Test PSNR of 0.5 vs 0.4 constant images is 20 dB."""
    a = np.full((16, 16, 3), 0.5)
    b = np.full((16, 16, 3), 0.4)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)


@pytest.mark.unit
def test_psnr_matches_scalar_loop(random_image):
    """Test PSNR against a per-pixel loop."""
    other = np.random.default_rng(9).random(random_image.shape)
    total, count = 0.0, 0
    for y in range(16):
        for x in range(16):
            for c in range(3):
                total += (float(random_image[y, x, c]) - float(other[y, x, c])) ** 2
                count += 1
    expected = 10.0 * math.log10(1.0 / (total / count))
    assert psnr(random_image, other) == pytest.approx(expected, abs=1e-9)


@pytest.mark.unit
def test_psnr_decreases_with_offset():
    """Test PSNR falls as a constant offset grows."""
    base = np.full((16, 16, 3), 0.3)
    values = [psnr(base, base + d) for d in (0.01, 0.05, 0.1, 0.3)]
    assert values == sorted(values, reverse=True)


@pytest.mark.unit
def test_psnr_shape_mismatch():
    """Test PSNR rejects images of different shapes."""
    with pytest.raises(DimensionError):
        psnr(np.zeros((16, 16, 3)), np.zeros((16, 8, 3)))


@pytest.mark.unit
def test_ssim_identity(random_image):
    """Test SSIM of an image with itself is 1."""
    assert ssim(random_image, random_image) == pytest.approx(1.0, abs=1e-9)


@pytest.mark.unit
def test_ssim_constant_closed_form():
    """Test SSIM of black vs white equals C1 / (1 + C1)."""
    c1 = 0.01 ** 2
    value = ssim(np.zeros((16, 16, 3)), np.ones((16, 16, 3)))
    assert value == pytest.approx(c1 / (1.0 + c1), abs=1e-7)
    assert value == pytest.approx(9.999e-5, abs=1e-7)


@pytest.mark.unit
def test_ssim_symmetric():
    """Test SSIM is symmetric for random pairs."""
    rng = np.random.default_rng(2)
    for _ in range(5):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


@pytest.mark.unit
def test_ssim_shift_invariance_on_constants():
    """Test sliding a close pair of constant images across [0.2, 0.8] barely moves SSIM."""
    values = [ssim(np.full((16, 16, 3), level), np.full((16, 16, 3), level + 0.005))
              for level in np.linspace(0.2, 0.795, 8)]
    assert max(values) - min(values) <= 1e-3


@pytest.mark.unit
def test_ssim_luminance_term_on_constants():
    """Test constant pairs follow the closed form (2ab + C1) / (a^2 + b^2 + C1)."""
    c1 = 0.01 ** 2
    for a, b in [(0.2, 0.3), (0.6, 0.7)]:
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        assert ssim(np.full((16, 16, 3), a), np.full((16, 16, 3), b)) == pytest.approx(expected, abs=1e-9)


@pytest.mark.unit
def test_ssim_rejects_small_images():
    """Test SSIM needs at least an 11x11 image."""
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 16, 3)), np.zeros((10, 16, 3)))


@pytest.mark.unit
def test_mask_iou():
    """Test IoU of overlapping masks and the empty-mask convention."""
    a = np.zeros((4, 4))
    b = np.zeros((4, 4))
    assert mask_iou(a, b) == 1.0
    a[0, :2] = 1
    b[0, 1:3] = 1
    assert mask_iou(a, b) == pytest.approx(1 / 3)


# ── Patch gridding ─────────────────────────────────────────────────────────

@pytest.mark.unit
def test_extract_patches_enumeration():
    """Test a 4x4x1 ramp tiles into row-major 2x2 patches."""
    feat = torch.arange(16, dtype=torch.float32).reshape(4, 4, 1)
    grid = extract_patches(feat, 2)
    assert grid.count == 4
    assert grid.patches[0].tolist() == [0, 1, 4, 5]
    assert grid.patches[1].tolist() == [2, 3, 6, 7]
    assert grid.patches[3].tolist() == [10, 11, 14, 15]


@pytest.mark.unit
@pytest.mark.parametrize("l", [1, 2, 4])
def test_patch_round_trip(l):
    """Test assemble_patches inverts extract_patches exactly."""
    feat = torch.rand(8, 8, 3)
    assert torch.equal(assemble_patches(extract_patches(feat, l)), feat)


@pytest.mark.unit
def test_patch_count_full_scale():
    """Test a 224x224x3 map tiles into 12544 patches of side 2."""
    grid = extract_patches(torch.zeros(224, 224, 3), 2)
    assert grid.count == 12544
    assert tuple(grid.patches.shape) == (12544, 12)


@pytest.mark.unit
def test_assemble_zero_grid():
    """Test an all-zero grid assembles to an all-zero map."""
    grid = extract_patches(torch.zeros(6, 6, 2), 3)
    assert torch.count_nonzero(assemble_patches(grid)) == 0


@pytest.mark.unit
def test_permuted_patches_restore():
    """Test permuting patches then undoing the permutation restores the map."""
    feat = torch.rand(8, 8, 3)
    grid = extract_patches(feat, 2)
    perm = torch.randperm(grid.count)
    shuffled = grid.patches[perm]
    restored = torch.empty_like(shuffled)
    restored[perm] = shuffled
    grid.patches = restored
    assert torch.equal(assemble_patches(grid), feat)


@pytest.mark.unit
def test_extract_patches_requires_divisibility():
    """Test non-divisible maps fail unless padding is enabled."""
    feat = torch.rand(5, 6, 2)
    with pytest.raises(DimensionError):
        extract_patches(feat, 2)
    grid = extract_patches(feat, 2, pad=True)
    assert (grid.grid_rows, grid.grid_cols) == (3, 3)
    assert torch.equal(assemble_patches(grid), feat)


@pytest.mark.unit
def test_assemble_rejects_inconsistent_grid():
    """Test metadata that disagrees with the patch array is rejected."""
    grid = extract_patches(torch.rand(4, 4, 1), 2)
    grid.grid_rows = 3
    with pytest.raises(DimensionError):
        assemble_patches(grid)


@pytest.mark.unit
def test_pad_reflect_falls_back_to_replicate():
    """Test pads as large as the map use replicate padding."""
    x = torch.arange(4, dtype=torch.float32).reshape(1, 1, 2, 2)
    out = pad_reflect(x, (2, 2, 2, 2))
    assert out.shape[-2:] == (6, 6)
    assert out[0, 0, 0, 0] == x[0, 0, 0, 0]


@pytest.mark.unit
def test_tensor_image_conversion(random_image):
    """Test HWC <-> NCHW conversion."""
    t = to_tensor(random_image)
    assert tuple(t.shape) == (1, 3, 16, 16)
    assert np.array_equal(to_image(t), random_image)


# ── PNG I/O ────────────────────────────────────────────────────────────────

@pytest.mark.unit
def test_save_load_quantization(tmp_path, random_image):
    """Test save then load stays within one 8-bit step."""
    path = tmp_path / "img.png"
    save_image(random_image, path)
    loaded = load_image(path)
    assert loaded.shape == random_image.shape
    assert np.abs(loaded - random_image).max() <= 1 / 255 + 1e-7


@pytest.mark.unit
def test_save_load_save_idempotent(tmp_path, random_image):
    """Test re-saving a loaded image reproduces the file bytes."""
    first, second = tmp_path / "a.png", tmp_path / "b.png"
    save_image(random_image, first)
    save_image(load_image(first), second)
    assert np.array_equal(load_image(first), load_image(second))


@pytest.mark.unit
def test_load_black_png(tmp_path):
    """Test a pure black PNG loads as zeros."""
    path = tmp_path / "black.png"
    PILImage.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(path)
    assert np.count_nonzero(load_image(path)) == 0


@pytest.mark.unit
def test_load_rejects_16_bit(tmp_path):
    """Test 16-bit grayscale PNGs are rejected with a format error."""
    path = tmp_path / "deep.png"
    PILImage.fromarray(np.full((8, 8), 1000, dtype=np.uint16)).save(path)
    with pytest.raises(ImageFormatError):
        load_image(path)


@pytest.mark.unit
def test_load_rejects_16_bit_rgb(tmp_path):
    """Test a 48-bit RGB PNG is rejected instead of being truncated to 8 bits."""
    path = tmp_path / "deep_rgb.png"
    _write_rgb16_png(path)
    with pytest.raises(ImageFormatError, match="16-bit"):
        load_image(path)


@pytest.mark.unit
def test_load_rejects_grayscale(tmp_path):
    """Test single-channel PNGs are rejected as images."""
    path = tmp_path / "gray.png"
    PILImage.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(path)
    with pytest.raises(ImageFormatError):
        load_image(path)


@pytest.mark.unit
def test_load_missing_file(tmp_path):
    """Test a missing file raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


@pytest.mark.unit
def test_mask_round_trip(tmp_path):
    """Test masks are written as {0, 255} and read back as {0, 1}."""
    mask = np.zeros((8, 8), dtype=np.float32)
    mask[2:4, 3:6] = 1.0
    path = tmp_path / "mask.png"
    save_mask(mask, path)
    raw = np.asarray(PILImage.open(path))
    assert set(np.unique(raw)) <= {0, 255}
    assert np.array_equal(load_mask(path), mask)
