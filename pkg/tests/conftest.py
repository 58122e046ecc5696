"""Pytest configuration and fixtures."""
import numpy as np
import pytest
import torch

from m2net.schemas import TrainConfig
from m2net.synth import generate_directory, generate_quadruple, load_quadruple_dir


def finite_difference_check(fn, tensors, n_coords=10, h=1e-5, seed=0):
    """
    Compare autograd against central differences at sampled coordinates.

    `fn()` must return a scalar built from `tensors` (float64 leaves with
    requires_grad). Returns the largest relative error found.
    """
    analytic = torch.autograd.grad(fn(), tensors)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_coords):
        k = int(torch.randint(len(tensors), (1,), generator=gen))
        t = tensors[k]
        i = int(torch.randint(t.numel(), (1,), generator=gen))
        flat = t.data.view(-1)
        original = flat[i].item()
        with torch.no_grad():
            flat[i] = original + h
            f_plus = fn().item()
            flat[i] = original - h
            f_minus = fn().item()
            flat[i] = original
        numeric = (f_plus - f_minus) / (2 * h)
        exact = analytic[k].reshape(-1)[i].item()
        worst = max(worst, abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-3))
    return worst


@pytest.fixture
def grad_check():
    """Central finite-difference checker (h=1e-5, float64, 10 coordinates)."""
    return finite_difference_check


@pytest.fixture(autouse=True)
def seeded():
    """Pin the global torch RNG for every test."""
    torch.manual_seed(0)
    yield


@pytest.fixture
def quadruple():
    """One 32x32 synthetic quadruple."""
    return generate_quadruple(seed=11, size=32)


@pytest.fixture
def random_image():
    """Random 16x16 RGB image in [0, 1]."""
    return np.random.default_rng(5).random((16, 16, 3)).astype(np.float32)


@pytest.fixture
def dataset_dir(tmp_path):
    """Quadruple directory with 4 samples of 32x32 (3 train, 1 test)."""
    root = tmp_path / "data"
    generate_directory(root, count=4, seed=3, size=32, test_fraction=0.25)
    return root


@pytest.fixture
def tiny_dataset(dataset_dir):
    """All samples of the quadruple directory."""
    return load_quadruple_dir(dataset_dir)


@pytest.fixture
def tiny_config():
    """Small, fast training configuration."""
    return TrainConfig(batch_size=2, epochs=2, image_size=32, checkpoint_every=1, seed=0)


@pytest.fixture
def tiny_batch(tiny_dataset):
    """First two samples stacked into a batch."""
    items = [tiny_dataset[0], tiny_dataset[1]]
    return {key: torch.stack([item[key] for item in items]) for key in ("composite", "diffuse", "specular", "mask")}
