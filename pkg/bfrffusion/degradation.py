"""
Synthetic degradation model and paired-dataset synthesis.

    y = resize_back( JPEG_q( clip( bicubic_down_r( x * k_sigma ) + n_delta ) ) )

Images live in memory as RGB uint8 arrays of shape [H, W, 3]; OpenCV's BGR
order only appears at the read/write boundary.
"""

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np
from scipy import ndimage
from tqdm import tqdm

from .errors import ConfigurationError, ImageReadError, UsageError

logger = logging.getLogger(__name__)

SIGMA_RANGE = (0.2, 10.0)
R_RANGE = (1, 8)
DELTA_RANGE = (0.0, 15.0)
Q_RANGE = (60, 100)

MAX_KERNEL_SIZE = 41
CUBIC_A = -0.5
MANIFEST_NAME = "manifest.jsonl"
LQ_SUBDIR = "lq"

PathLike = Union[str, Path]


@dataclass
class DegradationParams:
    """One application of the degradation model. q=None skips JPEG (test mode only)"""

    sigma: float
    r: int
    delta: float
    q: Optional[int]
    seed: int

    def validate(self, test_mode: bool = False) -> None:
        if self.r < 1:
            raise ConfigurationError(f"Downsampling factor r must be >= 1, got {self.r}")
        if self.sigma < 0 or self.delta < 0:
            raise ConfigurationError(f"sigma and delta must be non-negative, got {self.sigma}, {self.delta}")
        if self.q is not None and not 1 <= self.q <= 100:
            raise ConfigurationError(f"JPEG quality must lie in 1..100, got {self.q}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError(f"Seed must be an unsigned 64-bit integer, got {self.seed}")
        if test_mode:
            return
        if self.q is None:
            raise ConfigurationError("Skipping JPEG is only allowed in test mode")
        if not (SIGMA_RANGE[0] <= self.sigma <= SIGMA_RANGE[1] and R_RANGE[0] <= self.r <= R_RANGE[1]
                and DELTA_RANGE[0] <= self.delta <= DELTA_RANGE[1] and Q_RANGE[0] <= self.q <= Q_RANGE[1]):
            raise ConfigurationError(f"Parameters outside the sampling ranges: {self}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ManifestEntry:
    hq_path: str
    lq_path: str
    params: DegradationParams

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hq": self.hq_path,
            "lq": self.lq_path,
            "sigma": self.params.sigma,
            "r": self.params.r,
            "delta": self.params.delta,
            "q": self.params.q,
            "seed": self.params.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ManifestEntry":
        params = DegradationParams(
            sigma=float(data["sigma"]),
            r=int(data["r"]),
            delta=float(data["delta"]),
            q=None if data["q"] is None else int(data["q"]),
            seed=int(data["seed"]),
        )
        return cls(hq_path=data["hq"], lq_path=data["lq"], params=params)


@dataclass
class DatasetManifest:
    """HQ/LQ pairs; relative paths resolve against `root` (the manifest's directory)"""

    entries: List[ManifestEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def hq_file(self, entry: ManifestEntry) -> Path:
        path = Path(entry.hq_path)
        return path if path.is_absolute() else self.root / path

    def lq_file(self, entry: ManifestEntry) -> Path:
        path = Path(entry.lq_path)
        return path if path.is_absolute() else self.root / path

    def write(self, path: PathLike) -> None:
        lines = [json.dumps(entry.to_dict()) + "\n" for entry in self.entries]
        Path(path).write_text("".join(lines), encoding="utf-8")


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------


def read_image(path: PathLike) -> np.ndarray:
    """Read an 8-bit image file as RGB [H, W, 3]"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Image not found: {path}")
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise ImageReadError(f"Cannot decode image: {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_image(path: PathLike, image: np.ndarray) -> None:
    path = Path(path)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise UsageError(f"Expected uint8 [H,W,3] image, got {image.dtype} {image.shape}")
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"Failed to write image: {path}")


# ---------------------------------------------------------------------------
# Kernels and resampling
# ---------------------------------------------------------------------------


def gaussian_kernel(sigma: float, size: Optional[int] = None) -> np.ndarray:
    """Normalized isotropic Gaussian kernel; sigma=0 gives the delta kernel"""
    if sigma < 0:
        raise ConfigurationError(f"sigma must be non-negative, got {sigma}")
    if size is None:
        size = min(2 * math.ceil(3 * sigma) + 1, MAX_KERNEL_SIZE)
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"Kernel size must be a positive odd integer, got {size}")

    kernel = np.zeros((size, size), dtype=np.float64)
    if sigma == 0:
        kernel[size // 2, size // 2] = 1.0
        return kernel
    ax = np.arange(size, dtype=np.float64) - size // 2
    xx, yy = np.meshgrid(ax, ax)
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sigma ** 2))
    return kernel / kernel.sum()


def cubic(x: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    absx = np.abs(x)
    absx2 = absx ** 2
    absx3 = absx ** 3
    near = (a + 2) * absx3 - (a + 3) * absx2 + 1
    far = a * absx3 - 5 * a * absx2 + 8 * a * absx - 4 * a
    return np.where(absx <= 1, near, np.where(absx <= 2, far, 0.0))


def resize_weights(in_size: int, out_size: int) -> np.ndarray:
    """
    Dense [out_size, in_size] bicubic interpolation matrix.

    Antialiased when shrinking (kernel stretched by 1/scale); out-of-range
    taps clamp to the edge pixel; every row sums to 1.
    """
    scale = out_size / in_size
    kernel_width = 4.0 / scale if scale < 1 else 4.0
    x = np.arange(1, out_size + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - kernel_width / 2)
    taps = int(math.ceil(kernel_width)) + 2
    indices = left[:, None] + np.arange(taps, dtype=np.float64)[None, :]
    distance = u[:, None] - indices
    if scale < 1:
        weights = scale * cubic(distance * scale)
    else:
        weights = cubic(distance)
    weights = weights / weights.sum(axis=1, keepdims=True)
    indices = np.clip(indices, 1, in_size).astype(np.int64) - 1

    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    rows = np.repeat(np.arange(out_size)[:, None], taps, axis=1)
    np.add.at(matrix, (rows, indices), weights)
    return matrix


def bicubic_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bicubic resize of a float [H, W, C] array"""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.astype(np.float64, copy=True)
    rows = resize_weights(h, out_h)
    cols = resize_weights(w, out_w)
    out = np.einsum("oh,hwc->owc", rows, image.astype(np.float64))
    return np.einsum("pw,owc->opc", cols, out)


def jpeg_roundtrip(image: np.ndarray, quality: int) -> np.ndarray:
    """Encode/decode an RGB uint8 image through baseline JPEG"""
    bgr = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    ok, encoded = cv2.imencode(".jpg", bgr, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise OSError(f"JPEG encoding failed at quality {quality}")
    return cv2.cvtColor(cv2.imdecode(encoded, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)


def blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur of a float [H, W, C] array with reflect-101 borders"""
    if sigma == 0:
        return image.astype(np.float64, copy=True)
    kernel = gaussian_kernel(sigma)
    return ndimage.convolve(image.astype(np.float64), kernel[:, :, None], mode="mirror")


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------


def degrade(hq: np.ndarray, params: DegradationParams) -> np.ndarray:
    """
    Apply blur -> downsample -> noise -> JPEG -> resize back.

    Images whose sides are not multiples of r are reflect-padded first and
    cropped back at the end. The result depends only on (hq, params).
    """
    params.validate(test_mode=True)
    if hq.dtype != np.uint8 or hq.ndim != 3 or hq.shape[2] != 3:
        raise UsageError(f"Expected uint8 [H,W,3] image, got {hq.dtype} {hq.shape}")

    height, width = hq.shape[:2]
    r = params.r
    pad_h, pad_w = (-height) % r, (-width) % r
    x = hq.astype(np.float64)
    if pad_h or pad_w:
        x = np.pad(x, ((0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    full_h, full_w = x.shape[:2]

    x = blur(x, params.sigma)
    if r > 1:
        x = bicubic_resize(x, full_h // r, full_w // r)
    if params.delta > 0:
        rng = np.random.default_rng(params.seed)
        x = x + rng.standard_normal(x.shape) * params.delta
    x = np.clip(x, 0.0, 255.0)
    if params.q is not None:
        x = jpeg_roundtrip(np.rint(x).astype(np.uint8), params.q).astype(np.float64)
    if r > 1:
        x = bicubic_resize(x, full_h, full_w)
    x = x[:height, :width]
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def sample_params(
    rng_seed: int,
    sigma_range: Tuple[float, float] = SIGMA_RANGE,
    r_range: Tuple[int, int] = R_RANGE,
    delta_range: Tuple[float, float] = DELTA_RANGE,
    q_range: Tuple[int, int] = Q_RANGE,
) -> DegradationParams:
    """Draw sigma, r, delta, q uniformly from their ranges; deterministic in rng_seed"""
    rng = np.random.default_rng(rng_seed)
    return DegradationParams(
        sigma=float(rng.uniform(sigma_range[0], sigma_range[1])),
        r=int(rng.integers(r_range[0], r_range[1] + 1)),
        delta=float(rng.uniform(delta_range[0], delta_range[1])),
        q=int(rng.integers(q_range[0], q_range[1] + 1)),
        seed=int(rng_seed),
    )


def image_seed(master_seed: int, filename: str) -> int:
    """64-bit seed: first 8 bytes (little-endian) of BLAKE2b over 'master_seed:filename'"""
    digest = hashlib.blake2b(f"{master_seed}:{filename}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def select_sharp_images(paths: Sequence[Path], threshold: float) -> List[Path]:
    """Keep images whose Laplacian-variance sharpness exceeds `threshold`"""
    from .metrics import laplacian_sharpness

    kept = []
    for path in paths:
        score = laplacian_sharpness(read_image(path))
        if score > threshold:
            kept.append(path)
        else:
            logger.warning(f"Skipping {path.name}: sharpness {score:.1f} <= {threshold}")
    return kept


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Manifest not found: {path}")
    entries = []
    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise UsageError(f"{path}:{line_no}: malformed manifest line ({exc})") from exc
    return DatasetManifest(entries=entries, root=path.parent.resolve())


def synthesize_dataset(
    hq_dir: PathLike,
    out_dir: PathLike,
    master_seed: int,
    parallelism: int = 1,
    sigma_range: Tuple[float, float] = SIGMA_RANGE,
    r_range: Tuple[int, int] = R_RANGE,
    delta_range: Tuple[float, float] = DELTA_RANGE,
    q_range: Tuple[int, int] = Q_RANGE,
    skip_jpeg: bool = False,
    min_sharpness: Optional[float] = None,
    progress: bool = True,
) -> DatasetManifest:
    """
    Degrade every PNG in hq_dir into out_dir/lq and write out_dir/manifest.jsonl.

    Each image gets its own seed derived from (master_seed, filename), so the
    output does not depend on `parallelism`.
    """
    hq_dir, out_dir = Path(hq_dir), Path(out_dir)
    if not hq_dir.is_dir():
        raise FileNotFoundError(f"HQ directory not found: {hq_dir}")
    paths = sorted(p for p in hq_dir.iterdir() if p.is_file() and p.suffix.lower() == ".png")
    if not paths:
        raise UsageError(f"No PNG images in {hq_dir}")
    if min_sharpness is not None:
        paths = select_sharp_images(paths, min_sharpness)
        if not paths:
            raise UsageError(f"No image in {hq_dir} passes the sharpness threshold {min_sharpness}")

    lq_dir = out_dir / LQ_SUBDIR
    lq_dir.mkdir(parents=True, exist_ok=True)
    expected_shape = read_image(paths[0]).shape

    def process(path: Path) -> ManifestEntry:
        hq = read_image(path)
        if hq.shape != expected_shape:
            raise UsageError(f"{path.name} has shape {hq.shape}, expected {expected_shape}")
        params = sample_params(image_seed(master_seed, path.name), sigma_range, r_range, delta_range, q_range)
        if skip_jpeg:
            params.q = None
        lq_rel = f"{LQ_SUBDIR}/{path.stem}.png"
        write_image(out_dir / lq_rel, degrade(hq, params))
        logger.debug(f"{path.name}: {params}")
        hq_rel = Path(os.path.relpath(path.resolve(), out_dir.resolve())).as_posix()
        return ManifestEntry(hq_path=hq_rel, lq_path=lq_rel, params=params)

    logger.info(f"Synthesizing {len(paths)} LQ images with parallelism {parallelism}")
    if parallelism <= 1:
        entries = [process(p) for p in tqdm(paths, desc="degrade", disable=not progress)]
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            entries = list(tqdm(pool.map(process, paths), total=len(paths), desc="degrade", disable=not progress))

    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.write(out_dir / MANIFEST_NAME)
    logger.info(f"Wrote {len(entries)} pairs to {out_dir / MANIFEST_NAME}")
    return manifest
