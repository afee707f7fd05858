"""
Noise schedule, forward diffusion, the epsilon-prediction loss and the DDIM
sampler.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .autodiff import Tensor, default_dtype, mse, no_grad
from .config import SamplerConfig
from .errors import ConfigurationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

Timesteps = Union[int, np.ndarray, Sequence[int]]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray


class EpsModel(Protocol):
    def predict_eps(self, z_t: Tensor, t: Timesteps, x_lq: Optional[Tensor]) -> Tensor:
        ...

    def latent_shape(self, x_lq: Tensor) -> Tuple[int, ...]:
        ...


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ConfigurationError("betas must be a non-empty 1-D sequence")
    if np.any(betas < 0) or np.any(betas >= 1):
        raise ConfigurationError("Every beta must lie in [0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=betas.size, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive; products accumulated in float64"""
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not 0 <= beta_start <= beta_end < 1:
        raise ConfigurationError(f"Need 0 <= beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_timesteps(t: Timesteps, sched: NoiseSchedule) -> np.ndarray:
    steps = np.asarray(t, dtype=np.int64)
    if np.any(steps < 0) or np.any(steps >= sched.T):
        raise UsageError(f"Timestep {t} outside [0, {sched.T})")
    return steps


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    """Shape per-batch coefficients [N] to broadcast over [N, ...]"""
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (ndim - 1))


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def q_sample(z, t: Timesteps, eps, sched: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) * z + sqrt(1 - abar_t) * eps; t may be one int or one per batch row"""
    z, eps = _as_array(z), _as_array(eps)
    if z.shape != eps.shape:
        raise DimensionError(f"eps shape {eps.shape} differs from z shape {z.shape}")
    steps = _check_timesteps(t, sched)
    alpha_bar = _per_sample(sched.alpha_bars[steps], z.ndim)
    z_t = np.sqrt(alpha_bar) * z + np.sqrt(1.0 - alpha_bar) * eps
    return Tensor(z_t, dtype=z.dtype)


def q_sample_iterative(z, t: int, noise_seq, sched: NoiseSchedule) -> Tensor:
    """Step-by-step chain z_i = sqrt(alpha_i) z_{i-1} + sqrt(beta_i) eps_i for i = 0..t"""
    z, noise_seq = _as_array(z), _as_array(noise_seq)
    _check_timesteps(t, sched)
    if noise_seq.shape != (t + 1,) + z.shape:
        raise DimensionError(f"noise_seq must have shape {(t + 1,) + z.shape}, got {noise_seq.shape}")
    current = z.astype(np.float64)
    for i in range(t + 1):
        current = np.sqrt(sched.alphas[i]) * current + np.sqrt(sched.betas[i]) * noise_seq[i]
    return Tensor(current, dtype=z.dtype)


def diffusion_loss(model: EpsModel, z, x_lq: Optional[Tensor], t: Timesteps, eps, sched: NoiseSchedule) -> Tensor:
    """Mean-squared error between eps and the model's prediction at z_t"""
    z_t = q_sample(z, t, eps, sched)
    prediction = model.predict_eps(z_t, t, x_lq)
    target = eps if isinstance(eps, Tensor) else Tensor(eps, dtype=prediction.dtype)
    if prediction.shape != target.shape:
        raise DimensionError(f"Prediction shape {prediction.shape} differs from eps shape {target.shape}")
    return mse(prediction, target)


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Evenly strided timesteps over [0, T), descending, ending at 0"""
    if not 1 <= num_steps <= T:
        raise ConfigurationError(f"num_steps must lie in [1, {T}], got {num_steps}")
    stride = T // num_steps
    return np.arange(0, T, stride, dtype=np.int64)[:num_steps][::-1].copy()


def predict_x0(z_t: np.ndarray, eps_hat: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (z_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def ddim_step(
    z_t: np.ndarray,
    eps_hat: np.ndarray,
    alpha_bar: float,
    alpha_bar_prev: float,
    eta: float = 0.0,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One DDIM update from abar_t to abar_prev; eta=0 is deterministic"""
    x0 = predict_x0(z_t, eps_hat, alpha_bar)
    sigma = 0.0
    if eta > 0 and alpha_bar < 1:
        sigma = eta * np.sqrt((1 - alpha_bar_prev) / (1 - alpha_bar)) * np.sqrt(1 - alpha_bar / alpha_bar_prev)
    direction = np.sqrt(max(1.0 - alpha_bar_prev - sigma ** 2, 0.0)) * eps_hat
    z_prev = np.sqrt(alpha_bar_prev) * x0 + direction
    if sigma > 0:
        if noise is None:
            raise UsageError("eta > 0 needs a noise sample")
        z_prev = z_prev + sigma * noise
    return z_prev


def ddim_sample(
    model: EpsModel,
    x_lq: Tensor,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    shape: Optional[Tuple[int, ...]] = None,
    progress: bool = False,
) -> Tensor:
    """
    Run DDIM from z_T ~ N(0, I) (seeded by cfg.seed) to a clean latent.

    The model is queried with x_lq at every step, so its conditioning is
    recomputed from the current latent and timestep.
    """
    steps = ddim_timesteps(sched.T, cfg.num_steps)
    shape = tuple(shape) if shape is not None else tuple(model.latent_shape(x_lq))
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal(shape)
    dtype = default_dtype()

    with no_grad():
        for i, t in enumerate(tqdm(steps, desc="ddim", disable=not progress)):
            alpha_bar = float(sched.alpha_bars[t])
            alpha_bar_prev = float(sched.alpha_bars[steps[i + 1]]) if i + 1 < len(steps) else 1.0
            z_in = Tensor(z, dtype=dtype)
            eps_hat = model.predict_eps(z_in, int(t), x_lq).data.astype(np.float64)
            noise = rng.standard_normal(shape) if cfg.eta > 0 else None
            z = ddim_step(z, eps_hat, alpha_bar, alpha_bar_prev, cfg.eta, noise)
    return Tensor(z, dtype=dtype)
