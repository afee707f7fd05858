"""
Finite-difference verification of every differentiable op and of the full
epsilon-prediction loss on a micro configuration (4x4 latent, 8 channels).
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, use_dtype
from .config import ModelConfig
from .diffusion import build_schedule, diffusion_loss
from .restoration_net import RestorationModel, TransformerBlock, Initializer

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-3
MICRO_CONFIG = dict(
    image_size=8,
    latent_factor=2,
    base_channels=8,
    levels=2,
    heads=2,
    time_dim=8,
    prompt_len=2,
    prompt_dim=8,
    T=50,
    ffn_expansion=2,
)


def micro_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**MICRO_CONFIG, **overrides})


def randomize_parameters(model, rng: np.random.Generator, std: float = 0.3) -> None:
    """Replace every parameter (zero-initialised ones included) with N(0, std^2) draws"""
    for _, tensor in model.named_parameters():
        tensor.data[...] = rng.normal(0.0, std, size=tensor.shape)


def _weighted(rng: np.random.Generator, op: Callable[..., Tensor]) -> Callable[..., Tensor]:
    """Scalarise op's output with fixed random weights so every output element matters"""
    cache: Dict[str, Tensor] = {}

    def f(*inputs: Tensor) -> Tensor:
        out = op(*inputs)
        if "w" not in cache:
            cache["w"] = Tensor(rng.normal(size=out.shape))
        return ad.tensor_sum(ad.ewise(out, cache["w"], "mul"))

    return f


def _leaf(rng: np.random.Generator, *shape: int, offset: float = 0.0) -> Tensor:
    return Tensor(rng.normal(size=shape) + offset, requires_grad=True)


def op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[..., Tensor], List[Tensor]]]:
    block_init = Initializer(int(rng.integers(2 ** 32)))
    block = TransformerBlock(block_init, channels=4, heads=2, time_dim=6)
    randomize_parameters(block, rng)
    block_params = [t for _, t in block.named_parameters()]
    emb = Tensor(rng.normal(size=(2, 6)))

    def block_loss(x: Tensor, *params: Tensor) -> Tensor:
        return block(x, emb)

    return [
        ("conv2d", lambda x, w, b: ad.conv2d(x, w, b, stride=2, padding=1),
         [_leaf(rng, 1, 2, 4, 4), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)]),
        ("conv2d_grouped", lambda x, w: ad.conv2d(x, w, None, stride=1, padding=1, groups=2),
         [_leaf(rng, 2, 4, 5, 3), _leaf(rng, 4, 2, 3, 3)]),
        ("conv2d_depthwise", lambda x, w, b: ad.conv2d(x, w, b, padding=1, groups=3),
         [_leaf(rng, 1, 3, 4, 4), _leaf(rng, 3, 1, 3, 3), _leaf(rng, 3)]),
        ("layer_norm", lambda x: ad.layer_norm(x, 1e-5), [_leaf(rng, 2, 3, 2, 2)]),
        ("layer_norm_tokens", lambda x: ad.layer_norm(x, 1e-5, axis=-1), [_leaf(rng, 2, 5, 4)]),
        ("matmul", ad.matmul, [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)]),
        ("matmul_batched", ad.matmul, [_leaf(rng, 2, 2, 3, 4), _leaf(rng, 2, 1, 4, 3)]),
        ("softmax", lambda x: ad.softmax(x, axis=-1), [_leaf(rng, 3, 5)]),
        ("silu", ad.silu, [_leaf(rng, 4, 3)]),
        ("gelu", ad.gelu, [_leaf(rng, 2, 3, 2)]),
        ("ewise_add", lambda a, b: ad.ewise(a, b, "add"), [_leaf(rng, 2, 3, 2, 2), _leaf(rng, 3, 1, 1)]),
        ("ewise_mul", lambda a, b: ad.ewise(a, b, "mul"), [_leaf(rng, 2, 3, 2, 2), _leaf(rng, 1, 3, 1, 1)]),
        ("ewise_sub", lambda a, b: ad.ewise(a, b, "sub"), [_leaf(rng, 3, 4), _leaf(rng, 4)]),
        ("ewise_div", lambda a, b: ad.ewise(a, b, "div"), [_leaf(rng, 3, 4), _leaf(rng, 4, offset=3.0)]),
        ("space_to_depth", lambda x: ad.space_to_depth(x, 2), [_leaf(rng, 1, 2, 4, 4)]),
        ("upsample_concat", lambda a, b: ad.concat([ad.upsample_nearest(a, 2), b], axis=1),
         [_leaf(rng, 1, 2, 2, 2), _leaf(rng, 1, 1, 4, 4)]),
        ("mean_slice", lambda x: ad.tensor_mean(ad.slice_axis(x, 1, 1, 3), axis=(2, 3)), [_leaf(rng, 2, 4, 3, 3)]),
        ("transformer_block", block_loss, [_leaf(rng, 2, 4, 3, 3)] + block_params),
    ]


def composite_loss_case(seed: int = 0):
    """(f, params) for the full conditioned loss through SDRM, MFEM, TTPM and the denoiser"""
    rng = np.random.default_rng(seed)
    cfg = micro_config()
    model = RestorationModel(cfg)
    randomize_parameters(model, rng)
    for tensor in model.parameters().values():
        tensor.requires_grad = True
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    x_lq = Tensor(rng.uniform(-1, 1, size=(1, 3, cfg.image_size, cfg.image_size)))
    z = Tensor(rng.uniform(-1, 1, size=model.latent_shape(x_lq)))
    eps = Tensor(rng.normal(size=z.shape))
    t = np.array([cfg.T // 3])

    def f(*params: Tensor) -> Tensor:
        return diffusion_loss(model, z, x_lq, t, eps, sched)

    return f, list(model.parameters().values())


def run_gradcheck_suite(seed: int = 0, h: float = 1e-5, max_checks: int = 3, include_model: bool = True) -> Dict[str, float]:
    """Worst relative error per case, all in float64"""
    results: Dict[str, float] = {}
    with use_dtype(np.float64):
        rng = np.random.default_rng(seed)
        for name, op, inputs in op_cases(rng):
            results[name] = grad_check(_weighted(rng, op), inputs, h=h, max_checks=max_checks * 4, seed=seed)
            logger.info(f"grad_check {name}: {results[name]:.2e}")
        if include_model:
            f, params = composite_loss_case(seed)
            results["diffusion_loss"] = grad_check(f, params, h=h, max_checks=max_checks, seed=seed)
            logger.info(f"grad_check diffusion_loss: {results['diffusion_loss']:.2e}")
    return results
