"""
Reference-based quality metrics (PSNR, SSIM) and the Laplacian-variance
sharpness score used to filter blurry sources.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import cv2
import numpy as np
import pandas as pd

from .errors import UsageError

logger = logging.getLogger(__name__)

PIXEL_MAX = 255.0
SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])
METRIC_COLUMNS = ["image", "psnr", "ssim", "sharpness"]


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise UsageError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all RGB channels jointly; identical images give +inf"""
    a, b = _check_pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(PIXEL_MAX ** 2 / mse))


def _ssim_channel(i1: np.ndarray, i2: np.ndarray) -> float:
    c1 = (SSIM_K1 * PIXEL_MAX) ** 2
    c2 = (SSIM_K2 * PIXEL_MAX) ** 2

    mu1 = cv2.GaussianBlur(i1, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)
    mu2 = cv2.GaussianBlur(i2, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA)
    sigma1_sq = cv2.GaussianBlur(i1 * i1, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu1 * mu1
    sigma2_sq = cv2.GaussianBlur(i2 * i2, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu2 * mu2
    sigma12 = cv2.GaussianBlur(i1 * i2, SSIM_WINDOW, SSIM_SIGMA, sigmaY=SSIM_SIGMA) - mu1 * mu2

    ssim_map = ((2 * mu1 * mu2 + c1) * (2 * sigma12 + c2)) / ((mu1 * mu1 + mu2 * mu2 + c1) * (sigma1_sq + sigma2_sq + c2))
    return float(np.mean(ssim_map))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels"""
    a, b = _check_pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW[0]:
        raise UsageError(f"Images of shape {a.shape} are smaller than the {SSIM_WINDOW[0]}x{SSIM_WINDOW[1]} window")
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., :3] @ GRAY_WEIGHTS


def laplacian_sharpness(image: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian of the luma image, replicate borders"""
    response = cv2.Laplacian(to_gray(image), cv2.CV_64F, ksize=1, borderType=cv2.BORDER_REPLICATE)
    return float(response.var())


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Blur an 8-bit image with a Gaussian of the given std"""
    if sigma <= 0:
        return np.array(image, copy=True)
    size = 2 * math.ceil(3 * sigma) + 1
    blurred = cv2.GaussianBlur(np.asarray(image, dtype=np.float64), (size, size), sigma, sigmaY=sigma,
                               borderType=cv2.BORDER_REFLECT_101)
    return np.clip(np.rint(blurred), 0, 255).astype(np.uint8)


@dataclass
class MetricReport:
    images: List[str] = field(default_factory=list)
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    sharpness: List[float] = field(default_factory=list)

    def add(self, name: str, restored: np.ndarray, reference: np.ndarray) -> None:
        self.images.append(name)
        self.psnr.append(psnr(restored, reference))
        self.ssim.append(ssim(restored, reference))
        self.sharpness.append(laplacian_sharpness(restored))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else math.nan

    @property
    def mean_sharpness(self) -> float:
        return float(np.mean(self.sharpness)) if self.sharpness else math.nan

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"image": self.images, "psnr": self.psnr, "ssim": self.ssim, "sharpness": self.sharpness})
        mean_row = pd.DataFrame([{"image": "mean", "psnr": self.mean_psnr, "ssim": self.mean_ssim,
                                  "sharpness": self.mean_sharpness}])
        return pd.concat([frame, mean_row], ignore_index=True)[METRIC_COLUMNS]

    def write_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, na_rep="nan")
        return path


def evaluate_pairs(pairs: Iterable[Tuple[str, np.ndarray, np.ndarray]]) -> MetricReport:
    """(name, restored, reference) triples -> per-image and mean metrics"""
    report = MetricReport()
    for name, restored, reference in pairs:
        report.add(name, restored, reference)
    logger.info(f"Evaluated {len(report.images)} images: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return report


def evaluate_dirs(restored_dir: Union[str, Path], reference_dir: Union[str, Path]) -> MetricReport:
    """Pair PNGs by filename across two directories"""
    from .degradation import read_image

    restored_dir, reference_dir = Path(restored_dir), Path(reference_dir)
    for directory in (restored_dir, reference_dir):
        if not directory.is_dir():
            raise FileNotFoundError(f"Directory not found: {directory}")
    names = sorted(p.name for p in restored_dir.iterdir() if p.suffix.lower() == ".png")
    if not names:
        raise UsageError(f"No PNG images in {restored_dir}")
    return evaluate_pairs(
        (name, read_image(restored_dir / name), read_image(reference_dir / name)) for name in names
    )
