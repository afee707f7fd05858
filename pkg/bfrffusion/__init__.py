"""
bfrffusion - desk-scale conditioned-diffusion blind face restoration.

Numpy autodiff, a synthetic degradation model, DDPM/DDIM diffusion math,
the SDRM / MFEM / TTPM / denoiser network, phased AdamW training and
PSNR / SSIM / sharpness metrics, all runnable without pretrained weights.
"""

from .autodiff import Tensor, backward, grad_check, no_grad, use_dtype
from .config import ModelConfig, RunConfig, SamplerConfig, TrainConfig, load_run_config
from .degradation import DegradationParams, degrade, sample_params, synthesize_dataset
from .diffusion import NoiseSchedule, build_schedule, ddim_sample, diffusion_loss, q_sample
from .errors import (
    BFRError,
    CheckpointFormatError,
    ConfigurationError,
    DimensionError,
    ImageReadError,
    NaNLossError,
    UsageError,
)
from .metrics import laplacian_sharpness, psnr, ssim
from .restoration_net import RestorationModel, restore

__version__ = "0.1.0"
