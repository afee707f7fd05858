#!/usr/bin/env python3
"""
Test PSNR, SSIM and the Laplacian sharpness score
"""

import math

import numpy as np
import pandas as pd
import pytest

from bfrffusion.degradation import write_image
from bfrffusion.errors import UsageError
from bfrffusion.metrics import (
    MetricReport,
    evaluate_dirs,
    gaussian_blur,
    laplacian_sharpness,
    psnr,
    ssim,
)


def random_scene(rng: np.random.Generator, size: int = 48) -> np.ndarray:
    """Blocky scene with noise texture"""
    blocks = rng.integers(0, 256, size=(6, 6, 3))
    scene = np.kron(blocks, np.ones((size // 6, size // 6, 1)))
    scene = scene + rng.normal(0, 12, size=scene.shape)
    return np.clip(np.rint(scene), 0, 255).astype(np.uint8)


def test_psnr_values():
    zeros = np.zeros((8, 8, 3), dtype=np.uint8)
    assert psnr(zeros, zeros) == math.inf
    assert psnr(zeros, np.full_like(zeros, 255)) == 0.0
    assert abs(psnr(zeros, np.full_like(zeros, 10)) - 10 * math.log10(65025 / 100)) < 1e-9
    assert abs(psnr(zeros, np.full_like(zeros, 10)) - 28.13) < 0.01


def test_psnr_shape_mismatch():
    with pytest.raises(UsageError):
        psnr(np.zeros((8, 8, 3), dtype=np.uint8), np.zeros((8, 9, 3), dtype=np.uint8))


def test_ssim_identity_and_symmetry(rng):
    for _ in range(5):
        a = random_scene(rng)
        b = random_scene(rng)
        assert ssim(a, a) == 1.0
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
        assert -1.0 <= ssim(a, b) <= 1.0


def test_ssim_constant_images_closed_form():
    a = np.full((32, 32, 3), 100, dtype=np.uint8)
    b = np.full((32, 32, 3), 120, dtype=np.uint8)
    c1 = (0.01 * 255) ** 2
    expected = (2 * 100 * 120 + c1) / (100 ** 2 + 120 ** 2 + c1)
    assert abs(ssim(a, b) - expected) < 1e-3


def test_ssim_window_too_large():
    small = np.zeros((10, 10, 3), dtype=np.uint8)
    with pytest.raises(UsageError):
        ssim(small, small)


def test_sharpness_of_constant_image():
    assert laplacian_sharpness(np.full((20, 20, 3), 77, dtype=np.uint8)) == pytest.approx(0.0, abs=1e-9)


def test_sharpness_of_impulse():
    image = np.zeros((32, 32, 3), dtype=np.uint8)
    image[10, 20] = 200
    gray = 200 * (0.299 + 0.587 + 0.114)
    expected = (16 * gray ** 2 + 4 * gray ** 2) / (32 * 32)
    assert laplacian_sharpness(image) == pytest.approx(expected, rel=1e-9)


def test_blur_never_sharpens(rng):
    for _ in range(10):
        scene = random_scene(rng)
        assert laplacian_sharpness(scene) >= laplacian_sharpness(gaussian_blur(scene, 2.0))


def test_report_means_and_csv(rng, tmp_path):
    report = MetricReport()
    a, b = random_scene(rng), random_scene(rng)
    report.add("same.png", a, a)
    report.add("diff.png", a, b)
    assert report.mean_ssim == pytest.approx((1.0 + ssim(a, b)) / 2)
    assert report.mean_sharpness == pytest.approx(np.mean([laplacian_sharpness(a)] * 2))

    frame = pd.read_csv(report.write_csv(tmp_path / "metrics.csv"))
    assert list(frame.columns) == ["image", "psnr", "ssim", "sharpness"]
    assert list(frame["image"]) == ["same.png", "diff.png", "mean"]
    assert frame["psnr"].iloc[0] == math.inf


def test_evaluate_dirs(rng, tmp_path):
    restored, reference = tmp_path / "restored", tmp_path / "hq"
    restored.mkdir()
    reference.mkdir()
    for i in range(3):
        scene = random_scene(rng)
        write_image(restored / f"{i}.png", scene)
        write_image(reference / f"{i}.png", scene)
    report = evaluate_dirs(restored, reference)
    assert report.images == ["0.png", "1.png", "2.png"]
    assert report.mean_ssim == 1.0
    with pytest.raises(FileNotFoundError):
        evaluate_dirs(restored, tmp_path / "missing")


if __name__ == "__main__":
    print("🧪 Testing metrics...")
    raise SystemExit(pytest.main([__file__, "-v"]))
