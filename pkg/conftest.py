"""Shared pytest fixtures: float64 mode, micro model configs and image fixtures"""

from pathlib import Path

import numpy as np
import pytest

from bfrffusion.autodiff import use_dtype
from bfrffusion.degradation import synthesize_dataset, write_image
from bfrffusion.gradcheck_suite import MICRO_CONFIG, micro_config


def smooth_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Random face-like stand-in: low-frequency colour field plus a few edges"""
    coarse = rng.uniform(40, 215, size=(4, 4, 3))
    ramp = np.linspace(0, 3, size)
    yi = np.clip(np.floor(ramp).astype(int), 0, 3)
    image = coarse[yi][:, yi]
    image[size // 4: size // 2, size // 3: 2 * size // 3] = rng.uniform(20, 235, size=3)
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def write_images(directory: Path, count: int, size: int, seed: int = 0) -> list:
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        path = directory / f"face_{i:03d}.png"
        write_image(path, smooth_image(rng, size))
        paths.append(path)
    return paths


@pytest.fixture
def f64():
    with use_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def micro_config_dict():
    return dict(MICRO_CONFIG)


@pytest.fixture
def image_writer():
    return write_images


@pytest.fixture
def hq_dir(tmp_path):
    directory = tmp_path / "hq"
    write_images(directory, 3, 48, seed=7)
    return directory


@pytest.fixture
def toy_manifest(tmp_path):
    """Four 8x8 pairs degraded with mild test-mode parameters"""
    hq = tmp_path / "toy_hq"
    write_images(hq, 4, 8, seed=11)
    return synthesize_dataset(
        hq,
        tmp_path / "toy_data",
        master_seed=3,
        sigma_range=(0.2, 1.5),
        r_range=(1, 2),
        q_range=(60, 100),
        progress=False,
    )
