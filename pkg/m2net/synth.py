"""
Synthetic highlight quadruples and quadruple-directory ingestion.

A quadruple is (composite, diffuse, specular, mask). The diffuse layer is a
smooth random field with rectangles and a linear shading ramp; the specular
layer is an additive sum of 1-3 white-tinted anisotropic Gaussian blobs cut
off at two standard deviations, so the mask (specular > 0) is compact.

Directory layout:
    <id>_A.png  composite
    <id>_D.png  diffuse (ground truth)
    <id>_S.png  specular layer
    <id>_M.png  binary mask
    manifest.txt  one "<id> <split>" per line
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from torch.utils.data import Dataset

from m2net.errors import DatasetError, DimensionError, ImageFormatError
from m2net.imaging import load_image, load_mask, save_image, save_mask
from m2net.schemas import DatasetManifest, ManifestEntry

logger = logging.getLogger("m2net.synth")

MANIFEST_NAME = "manifest.txt"
MIN_SIZE = 16
BLOB_CUTOFF = 2.0  # Blob support radius in standard deviations
AMPLITUDE_RANGE = (0.3, 1.0)
SIGMA_RANGE = (0.03, 0.08)  # Fraction of image size


@dataclass
class Quadruple:
    """One training sample; arrays are HWC float32 (mask is HW)."""
    composite: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    mask: np.ndarray


def _diffuse_field(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.2, 0.7, (4, 4, 3))
    field = ndimage.zoom(coarse, (size / 4, size / 4, 1), order=1)[:size, :size]

    # Linear shading ramp
    theta = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    ramp = (xx * math.cos(theta) + yy * math.sin(theta)) * rng.uniform(0.0, 0.15)
    field = field + ramp[..., None]

    for _ in range(rng.integers(1, 4)):
        color = rng.uniform(0.15, 0.75, 3)
        y0, x0 = rng.integers(0, size - size // 4, 2)
        h, w = rng.integers(size // 8, size // 2, 2)
        field[y0:y0 + h, x0:x0 + w] = 0.3 * field[y0:y0 + h, x0:x0 + w] + 0.7 * color
    return np.clip(field, 0.05, 0.8)


def _specular_layer(rng: np.random.Generator, size: int, amplitude_override: Optional[float]) -> np.ndarray:
    layer = np.zeros((size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    floor = math.exp(-0.5 * BLOB_CUTOFF ** 2)

    for _ in range(rng.integers(1, 4)):
        amplitude = rng.uniform(*AMPLITUDE_RANGE)
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, 2)
        sy, sx = rng.uniform(*SIGMA_RANGE, 2) * size
        theta = rng.uniform(0.0, math.pi)
        tint = 1.0 - rng.uniform(0.0, 0.1, 3)
        if amplitude_override is not None:
            amplitude = amplitude_override

        u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
        v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
        r2 = (u / sx) ** 2 + (v / sy) ** 2
        blob = np.clip((np.exp(-0.5 * r2) - floor) / (1.0 - floor), 0.0, None)
        layer += amplitude * blob[..., None] * tint
    return layer


def generate_quadruple(seed: int, size: int = 64, amplitude_override: Optional[float] = None) -> Quadruple:
    """
    Deterministically generate a synthetic highlight quadruple.

    Args:
        seed: fully determines the sample
        size: side length in pixels (>= 16)
        amplitude_override: force every blob peak to this amplitude
            (0 gives a highlight-free sample); random draws are unchanged

    Raises:
        DimensionError: if size < 16
    """
    if size < MIN_SIZE:
        raise DimensionError(f"synthetic samples need size >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    diffuse = _diffuse_field(rng, size).astype(np.float32)
    specular = _specular_layer(rng, size, amplitude_override).astype(np.float32)
    composite = np.clip(diffuse + specular, 0.0, 1.0)
    mask = (specular.max(axis=-1) > 0).astype(np.float32)
    return Quadruple(composite=composite, diffuse=diffuse, specular=specular, mask=mask)


# ===== Directory I/O =====

def save_quadruple(q: Quadruple, root: Union[str, Path], sample_id: str) -> None:
    """Write the four PNGs of one sample."""
    paths = ManifestEntry(sample_id=sample_id).paths(Path(root))
    save_image(q.composite, paths["composite"])
    save_image(q.diffuse, paths["diffuse"])
    save_image(np.clip(q.specular, 0.0, 1.0), paths["specular"])
    save_mask(q.mask, paths["mask"])


def write_manifest(root: Union[str, Path], entries: Iterable[ManifestEntry]) -> Path:
    """Write manifest.txt with one "<id> <split>" per line."""
    path = Path(root) / MANIFEST_NAME
    lines = [f"{e.sample_id} {e.split}\n" for e in entries]
    path.write_text("".join(lines))
    return path


def read_manifest(root: Union[str, Path]) -> DatasetManifest:
    """
    Parse manifest.txt of a quadruple directory.

    Lines are "<id> [split]"; blank lines and lines starting with # are skipped.

    Raises:
        DatasetError: if the manifest is missing or malformed
    """
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) > 2 or (len(parts) == 2 and parts[1] not in ("train", "test")):
            raise DatasetError(f"{path}:{lineno}: expected '<id> [train|test]', got {line!r}")
        entries.append(ManifestEntry(sample_id=parts[0], split=parts[1] if len(parts) == 2 else "train"))
    try:
        return DatasetManifest(root=root, entries=entries)
    except ValueError as e:
        raise DatasetError(f"{path}: {e}")


def generate_directory(root: Union[str, Path], count: int, seed: int, size: int = 64,
                       test_fraction: float = 0.25) -> DatasetManifest:
    """Generate `count` quadruples into `root`; the last round(count * test_fraction) are tagged test."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    n_test = int(round(count * test_fraction))
    entries = []
    for i in range(count):
        sample_id = f"q{i:05d}"
        q = generate_quadruple(seed * 100_000 + i, size)
        save_quadruple(q, root, sample_id)
        entries.append(ManifestEntry(sample_id=sample_id, split="test" if i >= count - n_test else "train"))
        logger.debug(f"Generated {sample_id} (coverage {q.mask.mean():.3f})")
    write_manifest(root, entries)
    logger.info(f"Generated {count} quadruples in {root} ({count - n_test} train, {n_test} test)")
    return DatasetManifest(root=root, entries=entries)


class QuadrupleDataset(Dataset):
    """
    Lazily loaded quadruple directory.

    Items are dicts of CHW float32 tensors (`composite`, `diffuse`,
    `specular`, `mask`) plus `sample_id`. When `image_size` is set, samples of
    another size are resized (bilinear for images, nearest for the mask).
    """

    def __init__(self, manifest: DatasetManifest, image_size: Optional[int] = None):
        self.manifest = manifest
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.manifest.entries)

    @property
    def sample_ids(self) -> List[str]:
        return [e.sample_id for e in self.manifest.entries]

    def quadruple(self, index: int) -> Quadruple:
        """Load one sample as arrays, validating files and dimensions."""
        entry = self.manifest.entries[index]
        paths = entry.paths(self.manifest.root)
        for path in paths.values():
            if not path.is_file():
                raise DatasetError(f"missing file {path}", sample_id=entry.sample_id)
        try:
            q = Quadruple(
                composite=load_image(paths["composite"]),
                diffuse=load_image(paths["diffuse"]),
                specular=load_image(paths["specular"]),
                mask=load_mask(paths["mask"]),
            )
        except (OSError, ImageFormatError) as e:
            raise DatasetError(str(e), sample_id=entry.sample_id)

        shapes = {q.composite.shape[:2], q.diffuse.shape[:2], q.specular.shape[:2], q.mask.shape}
        if len(shapes) != 1:
            raise DatasetError(f"image dimensions disagree: {sorted(shapes)}", sample_id=entry.sample_id)
        return q

    def __getitem__(self, index: int) -> Dict[str, object]:
        q = self.quadruple(index)
        item = {
            "composite": torch.from_numpy(q.composite).permute(2, 0, 1).contiguous(),
            "diffuse": torch.from_numpy(q.diffuse).permute(2, 0, 1).contiguous(),
            "specular": torch.from_numpy(q.specular).permute(2, 0, 1).contiguous(),
            "mask": torch.from_numpy(q.mask).unsqueeze(0),
        }
        size = self.image_size
        if size is not None and tuple(item["composite"].shape[-2:]) != (size, size):
            for key in ("composite", "diffuse", "specular"):
                item[key] = F.interpolate(item[key][None], size=(size, size), mode="bilinear",
                                          align_corners=False)[0].clamp(0.0, 1.0)
            item["mask"] = F.interpolate(item["mask"][None], size=(size, size), mode="nearest")[0]
        item["sample_id"] = self.manifest.entries[index].sample_id
        return item


def load_quadruple_dir(path: Union[str, Path], manifest: Optional[DatasetManifest] = None,
                       split: Optional[str] = None, image_size: Optional[int] = None) -> QuadrupleDataset:
    """
    Open a quadruple directory as a lazily loaded dataset.

    Args:
        path: directory holding the PNGs (and manifest.txt when `manifest` is None)
        manifest: explicit manifest; read from `path` when omitted
        split: keep only "train" or "test" entries
        image_size: resize samples to this square size
    """
    if manifest is None:
        manifest = read_manifest(path)
    elif Path(manifest.root) != Path(path):
        manifest = DatasetManifest(root=Path(path), entries=manifest.entries)
    return QuadrupleDataset(manifest.select(split), image_size=image_size)
