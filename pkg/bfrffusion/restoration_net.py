"""
Restoration network at desk scale.

Four conditioning/denoising parts share one parameter namespace:

    sdrm.*      shallow degradation removal: strided encoder + noise conv + ResBlock
    mfem.*      U-shaped stack of time-conditioned transformer blocks with 1x1 taps
    ttpm.*      learned prompt fused with the time embedding by cross-attention
    denoiser.*  toy epsilon-prediction U-Net receiving the taps and the prompt

The latent codec is a parameter-free space-to-depth rearrangement.
"""

import logging
import math
from collections import OrderedDict
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np

from .autodiff import (
    Tensor,
    concat,
    conv2d,
    depth_to_space,
    ewise,
    gelu,
    layer_norm,
    linear,
    matmul,
    permute,
    reshape,
    scale,
    shift,
    silu,
    softmax,
    space_to_depth,
    split,
    upsample_nearest,
)
from .config import ABLATION_FLAGS, FREEZE_FLAGS, ModelConfig, SamplerConfig
from .diffusion import NoiseSchedule, Timesteps, ddim_sample
from .errors import ConfigurationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

PHASES = ("prior", "phase1", "phase2")
TAP_STD = 1e-3
SINUSOID_BASE = 10000.0


class Initializer:
    """Seeded parameter initialisation"""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def fan_in_uniform(self, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = 1.0 / math.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape)

    def normal(self, shape: Tuple[int, ...], std: float) -> np.ndarray:
        return self.rng.normal(0.0, std, size=shape)


class Module:
    """Named-parameter container; children contribute dotted prefixes"""

    def __init__(self):
        self._params: Dict[str, Tensor] = OrderedDict()
        self._children: Dict[str, "Module"] = OrderedDict()

    def add_param(self, name: str, array: np.ndarray) -> Tensor:
        tensor = Tensor(array, requires_grad=True)
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")


class Conv(Module):
    def __init__(self, init: Initializer, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, groups: int = 1, weight_init: str = "default", std: float = TAP_STD):
        super().__init__()
        self.stride, self.groups, self.padding = stride, groups, kernel // 2
        shape = (c_out, c_in // groups, kernel, kernel)
        fan_in = (c_in // groups) * kernel * kernel
        if weight_init == "zero":
            self.weight = self.add_param("weight", np.zeros(shape))
            self.bias = self.add_param("bias", np.zeros(c_out))
        elif weight_init == "normal":
            self.weight = self.add_param("weight", init.normal(shape, std))
            self.bias = self.add_param("bias", np.zeros(c_out))
        else:
            self.weight = self.add_param("weight", init.fan_in_uniform(shape, fan_in))
            self.bias = self.add_param("bias", init.fan_in_uniform((c_out,), fan_in))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, groups=self.groups)


class Linear(Module):
    def __init__(self, init: Initializer, d_in: int, d_out: int, zero: bool = False):
        super().__init__()
        if zero:
            self.weight = self.add_param("weight", np.zeros((d_in, d_out)))
            self.bias = self.add_param("bias", np.zeros(d_out))
        else:
            self.weight = self.add_param("weight", init.fan_in_uniform((d_in, d_out), d_in))
            self.bias = self.add_param("bias", init.fan_in_uniform((d_out,), d_in))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


# ---------------------------------------------------------------------------
# Codec and time embedding
# ---------------------------------------------------------------------------


def latent_encode(x: Tensor, factor: int) -> Tensor:
    """[N,3,H,W] image in [-1,1] -> [N,3f^2,H/f,W/f] latent (lossless)"""
    return space_to_depth(x, factor)


def latent_decode(z: Tensor, factor: int) -> Tensor:
    return depth_to_space(z, factor)


def image_to_tensor(images: np.ndarray) -> Tensor:
    """uint8 [H,W,3] or [N,H,W,3] -> Tensor [N,3,H,W] scaled to [-1,1]"""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    return Tensor(images.transpose(0, 3, 1, 2).astype(np.float64) / 127.5 - 1.0)


def tensor_to_image(x: Tensor) -> np.ndarray:
    """Tensor [N,3,H,W] in [-1,1] -> clamped uint8 [N,H,W,3]"""
    pixels = (np.clip(x.data.astype(np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.clip(np.rint(pixels), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """[N] timesteps -> [N, dim]: first half sin, second half cos, log-spaced frequencies"""
    half = dim // 2
    freqs = np.exp(-math.log(SINUSOID_BASE) * np.arange(half, dtype=np.float64) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TimeEmbedder(Module):
    """emb = Linear(SiLU(Linear(sinusoid(t))))"""

    def __init__(self, init: Initializer, time_dim: int, T: int):
        super().__init__()
        self.time_dim, self.T = time_dim, T
        self.fc1 = self.add_child("fc1", Linear(init, time_dim, time_dim))
        self.fc2 = self.add_child("fc2", Linear(init, time_dim, time_dim))

    def __call__(self, t: Timesteps) -> Tensor:
        steps = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if np.any(steps < 0) or np.any(steps >= self.T):
            raise UsageError(f"Timestep {t} outside [0, {self.T})")
        return self.fc2(silu(self.fc1(Tensor(sinusoidal_embedding(steps, self.time_dim)))))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class ResBlock(Module):
    """x + conv2(silu(conv1(x) + proj(silu(emb))))"""

    def __init__(self, init: Initializer, channels: int, time_dim: int):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv(init, channels, channels, 3))
        self.emb_proj = self.add_child("emb_proj", Linear(init, time_dim, channels))
        self.conv2 = self.add_child("conv2", Conv(init, channels, channels, 3))

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(x)
        e = reshape(self.emb_proj(silu(emb)), (emb.shape[0], h.shape[1], 1, 1))
        h = self.conv2(silu(ewise(h, e, "add")))
        return ewise(x, h, "add")


class TransformerBlock(Module):
    """
    Time-modulated transposed-attention block.

    (a1, b1, g1, a2, b2, g2) = MLP(emb)
    F2 = a1 * (1 + LN(F_in)) + b1
    F3 = F_in + g1 * proj(channel_attention(F2))
    F4 = a2 * (1 + LN(F3)) + b2
    F_out = F3 + g2 * GFFN(F4)

    The last affine layer starts at zero, so the block is the identity at init.
    """

    def __init__(self, init: Initializer, channels: int, heads: int, time_dim: int, ffn_expansion: int = 2):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"{channels} channels not divisible by {heads} heads")
        self.channels, self.heads = channels, heads
        hidden = channels * ffn_expansion

        self.affine_in = self.add_child("affine_in", Linear(init, time_dim, channels))
        self.affine_out = self.add_child("affine_out", Linear(init, channels, 6 * channels, zero=True))

        self.qkv_pw = self.add_child("qkv_pw", Conv(init, channels, 3 * channels, 1))
        self.qkv_dw = self.add_child("qkv_dw", Conv(init, 3 * channels, 3 * channels, 3, groups=3 * channels))
        self.temperature = self.add_param("temperature", np.ones((1, heads, 1, 1)))
        self.attn_proj = self.add_child("attn_proj", Conv(init, channels, channels, 1))

        self.ffn_pw1 = self.add_child("ffn_pw1", Conv(init, channels, hidden, 1))
        self.ffn_dw1 = self.add_child("ffn_dw1", Conv(init, hidden, hidden, 3, groups=hidden))
        self.ffn_pw2 = self.add_child("ffn_pw2", Conv(init, channels, hidden, 1))
        self.ffn_dw2 = self.add_child("ffn_dw2", Conv(init, hidden, hidden, 3, groups=hidden))
        self.ffn_pw3 = self.add_child("ffn_pw3", Conv(init, channels, hidden, 1))
        self.ffn_out = self.add_child("ffn_out", Conv(init, hidden, channels, 1))

    def modulation(self, emb: Tensor) -> List[Tensor]:
        params = self.affine_out(silu(self.affine_in(emb)))
        return split(reshape(params, (emb.shape[0], 6 * self.channels, 1, 1)), 6, axis=1)

    def channel_attention(self, f2: Tensor) -> Tuple[Tensor, Tensor]:
        """Per-head softmax((Q K^T) / alpha) over C/h x C/h, plus V; both [N, h, C/h, .]"""
        n, c, height, width = f2.shape
        q, k, v = split(self.qkv_dw(self.qkv_pw(f2)), 3, axis=1)
        heads_shape = (n, self.heads, c // self.heads, height * width)
        q, k, v = (reshape(x, heads_shape) for x in (q, k, v))
        scores = ewise(matmul(q, permute(k, (0, 1, 3, 2))), self.temperature, "div")
        return softmax(scores, axis=-1), v

    def attention(self, f2: Tensor) -> Tensor:
        attn, v = self.channel_attention(f2)
        out = reshape(matmul(attn, v), f2.shape)
        return self.attn_proj(out)

    def gffn(self, x: Tensor) -> Tensor:
        gate = gelu(self.ffn_dw1(self.ffn_pw1(x)))
        value = self.ffn_dw2(self.ffn_pw2(x))
        path3 = gelu(self.ffn_pw3(x))
        return self.ffn_out(ewise(ewise(gate, value, "mul"), path3, "mul"))

    @staticmethod
    def _sft(x: Tensor, alpha: Tensor, beta: Tensor) -> Tensor:
        return ewise(ewise(shift(layer_norm(x, axis=1), 1.0), alpha, "mul"), beta, "add")

    def __call__(self, f_in: Tensor, emb: Tensor) -> Tensor:
        a1, b1, g1, a2, b2, g2 = self.modulation(emb)
        f2 = self._sft(f_in, a1, b1)
        f3 = ewise(f_in, ewise(self.attention(f2), g1, "mul"), "add")
        f4 = self._sft(f3, a2, b2)
        return ewise(f3, ewise(self.gffn(f4), g2, "mul"), "add")


class CrossAttention(Module):
    """Pre-norm single-head attention from feature-map tokens to prompt tokens"""

    def __init__(self, init: Initializer, channels: int, context_dim: int):
        super().__init__()
        self.q = self.add_child("q", Linear(init, channels, channels))
        self.k = self.add_child("k", Linear(init, context_dim, channels))
        self.v = self.add_child("v", Linear(init, context_dim, channels))
        self.o = self.add_child("o", Linear(init, channels, channels))

    def __call__(self, h: Tensor, prompt: Tensor) -> Tensor:
        n, c, height, width = h.shape
        tokens = permute(reshape(h, (n, c, height * width)), (0, 2, 1))
        q = self.q(layer_norm(tokens, axis=-1))
        k, v = self.k(prompt), self.v(prompt)
        scores = scale(matmul(q, permute(k, (0, 2, 1))), 1.0 / math.sqrt(c))
        tokens = ewise(tokens, self.o(matmul(softmax(scores, axis=-1), v)), "add")
        return reshape(permute(tokens, (0, 2, 1)), (n, c, height, width))


# ---------------------------------------------------------------------------
# The four parts
# ---------------------------------------------------------------------------


class SDRM(Module):
    """F1 = ResBlock(Encoder(x_lq) + Conv(z_t), emb)"""

    def __init__(self, init: Initializer, cfg: ModelConfig, ablation: Set[str]):
        super().__init__()
        self.cfg = cfg
        c, f = cfg.base_channels, cfg.latent_factor
        self.pixel_unshuffle = "pixel_unshuffle_sdrm" in ablation
        self.time_embed = self.add_child("time_embed", TimeEmbedder(init, cfg.time_dim, cfg.T))
        if self.pixel_unshuffle:
            self.encoder = [self.add_child("enc.0", Conv(init, 3 * f * f, c, 3))]
        else:
            stages = int(math.log2(f))
            self.encoder = [
                self.add_child(f"enc.{i}", Conv(init, 3 if i == 0 else c, c, 3, stride=2)) for i in range(stages)
            ]
        self.noise_conv = None
        if "no_noise_zt" not in ablation:
            self.noise_conv = self.add_child("noise", Conv(init, cfg.latent_channels, c, 3))
        self.res = self.add_child("res", ResBlock(init, c, cfg.time_dim))

    def encode(self, x_lq: Tensor) -> Tensor:
        if self.pixel_unshuffle:
            return self.encoder[0](space_to_depth(x_lq, self.cfg.latent_factor))
        h = x_lq
        for i, conv in enumerate(self.encoder):
            h = conv(h if i == 0 else silu(h))
        return h

    def __call__(self, x_lq: Tensor, z_t: Tensor, emb: Tensor) -> Tensor:
        f0 = self.encode(x_lq)
        if self.noise_conv is not None:
            expected = (f0.shape[0], self.cfg.latent_channels) + f0.shape[2:]
            if z_t.shape != expected:
                raise DimensionError(f"z_t shape {z_t.shape} does not match latent shape {expected}")
            f0 = ewise(f0, self.noise_conv(z_t), "add")
        return self.res(f0, emb)


class MFEM(Module):
    """
    U-shaped feature extractor. Emits one tapped map per block in the order
    encoder levels (fine to coarse), middle, decoder levels (coarse to fine).
    """

    def __init__(self, init: Initializer, cfg: ModelConfig, ablation: Set[str]):
        super().__init__()
        c, levels = cfg.base_channels, cfg.levels
        self.levels = levels
        self.use_time = "mfem_no_time" not in ablation

        def make_block(i: int) -> Module:
            if "resblock_mfem" in ablation:
                return self.add_child(f"block.{i}", ResBlock(init, c, cfg.time_dim))
            return self.add_child(f"block.{i}", TransformerBlock(init, c, cfg.heads, cfg.time_dim, cfg.ffn_expansion))

        self.blocks = [make_block(i) for i in range(2 * levels + 1)]
        self.downs = [self.add_child(f"down.{l}", Conv(init, c, c, 3, stride=2)) for l in range(levels - 1)]
        self.ups = {j: self.add_child(f"up.{j}", Conv(init, c, c, 3)) for j in range(1, levels)}
        self.fuses = [self.add_child(f"fuse.{j}", Conv(init, 2 * c, c, 1)) for j in range(levels)]
        self.taps = [
            self.add_child(f"tap.{i}", Conv(init, c, c, 1, weight_init="normal", std=TAP_STD))
            for i in range(2 * levels + 1)
        ]

    def __call__(self, f1: Tensor, emb: Tensor) -> List[Tensor]:
        if not self.use_time:
            emb = Tensor(np.zeros(emb.shape), dtype=emb.dtype)
        levels = self.levels
        outputs, skips = [], []
        h = f1
        for l in range(levels):
            h = self.blocks[l](h, emb)
            outputs.append(h)
            skips.append(h)
            if l < levels - 1:
                h = self.downs[l](h)
        h = self.blocks[levels](h, emb)
        outputs.append(h)
        for j in range(levels):
            if j > 0:
                h = self.ups[j](upsample_nearest(h, 2))
            h = self.fuses[j](concat([h, skips[levels - 1 - j]], axis=1))
            h = self.blocks[levels + 1 + j](h, emb)
            outputs.append(h)
        return [tap(out) for tap, out in zip(self.taps, outputs)]


class TTPM(Module):
    """Prompt = MLP(CrossAttention(P, emb) + P)"""

    def __init__(self, init: Initializer, cfg: ModelConfig, ablation: Set[str]):
        super().__init__()
        dp = cfg.prompt_dim
        self.use_time = "ttpm_no_time" not in ablation
        self.fixed = "fixed_prompt" in ablation
        self.P = self.add_param("P", init.normal((cfg.prompt_len, dp), 1.0 / math.sqrt(dp)))
        self.emb_proj = self.add_child("attn.emb", Linear(init, cfg.time_dim, dp))
        self.q = self.add_child("attn.q", Linear(init, dp, dp))
        self.k = self.add_child("attn.k", Linear(init, dp, dp))
        self.v = self.add_child("attn.v", Linear(init, dp, dp))
        self.o = self.add_child("attn.o", Linear(init, dp, dp, zero=True))
        self.mlp_in = self.add_child("mlp.0", Linear(init, dp, dp))
        self.mlp_out = self.add_child("mlp.1", Linear(init, dp, dp))

    def _time_token(self, emb: Tensor) -> Tensor:
        return reshape(self.emb_proj(emb), (emb.shape[0], 1, self.P.shape[1]))

    def attention_weights(self, emb: Tensor) -> Tensor:
        """[N, L_p, 1]: softmax over the single time token"""
        k = self.k(self._time_token(emb))
        scores = scale(matmul(self.q(self.P), permute(k, (0, 2, 1))), 1.0 / math.sqrt(self.P.shape[1]))
        return softmax(scores, axis=-1)

    def mlp(self, x: Tensor) -> Tensor:
        return self.mlp_out(gelu(self.mlp_in(x)))

    def __call__(self, emb: Tensor) -> Tensor:
        n = emb.shape[0]
        batch_zeros = Tensor(np.zeros((n,) + self.P.shape), dtype=self.P.dtype)
        if self.fixed:
            return ewise(batch_zeros, self.P, "add")
        if not self.use_time:
            return ewise(batch_zeros, self.mlp(self.P), "add")
        attended = matmul(self.attention_weights(emb), self.v(self._time_token(emb)))
        return self.mlp(ewise(self.o(attended), self.P, "add"))


class Denoiser(Module):
    """
    Toy epsilon-prediction U-Net. Each level runs ResBlock(time) then prompt
    cross-attention. Conditioning taps are added to the encoder skips, the
    middle output and the decoder input of each level.
    """

    def __init__(self, init: Initializer, cfg: ModelConfig):
        super().__init__()
        c, levels, dp = cfg.base_channels, cfg.levels, cfg.prompt_dim
        self.levels = levels
        self.time_embed = self.add_child("time_embed", TimeEmbedder(init, cfg.time_dim, cfg.T))
        self.conv_in = self.add_child("encoder.conv_in", Conv(init, cfg.latent_channels, c, 3))
        self.enc_res = [self.add_child(f"encoder.res.{l}", ResBlock(init, c, cfg.time_dim)) for l in range(levels)]
        self.enc_xattn = [self.add_child(f"encoder.xattn.{l}", CrossAttention(init, c, dp)) for l in range(levels)]
        self.enc_down = [self.add_child(f"encoder.down.{l}", Conv(init, c, c, 3, stride=2)) for l in range(levels - 1)]
        self.mid_res = self.add_child("middle.res", ResBlock(init, c, cfg.time_dim))
        self.mid_xattn = self.add_child("middle.xattn", CrossAttention(init, c, dp))
        self.dec_up = {j: self.add_child(f"decoder.up.{j}", Conv(init, c, c, 3)) for j in range(1, levels)}
        self.dec_fuse = [self.add_child(f"decoder.fuse.{j}", Conv(init, 2 * c, c, 1)) for j in range(levels)]
        self.dec_res = [self.add_child(f"decoder.res.{j}", ResBlock(init, c, cfg.time_dim)) for j in range(levels)]
        self.dec_xattn = [self.add_child(f"decoder.xattn.{j}", CrossAttention(init, c, dp)) for j in range(levels)]
        self.conv_out = self.add_child("decoder.conv_out", Conv(init, c, cfg.latent_channels, 3, weight_init="zero"))

    @staticmethod
    def _inject(h: Tensor, features: Optional[Sequence[Tensor]], index: int) -> Tensor:
        if features is None:
            return h
        feature = features[index]
        if feature.shape != h.shape:
            raise DimensionError(f"Conditioning feature {index} has shape {feature.shape}, expected {h.shape}")
        return ewise(h, feature, "add")

    def __call__(self, z_t: Tensor, t: np.ndarray, features: Optional[Sequence[Tensor]], prompt: Tensor) -> Tensor:
        levels = self.levels
        if features is not None and len(features) != 2 * levels + 1:
            raise ConfigurationError(f"Expected {2 * levels + 1} conditioning features, got {len(features)}")
        emb = self.time_embed(t)
        h = self.conv_in(z_t)
        skips = []
        for l in range(levels):
            h = self.enc_xattn[l](self.enc_res[l](h, emb), prompt)
            skips.append(self._inject(h, features, l))
            if l < levels - 1:
                h = self.enc_down[l](h)
        h = self.mid_xattn(self.mid_res(h, emb), prompt)
        h = self._inject(h, features, levels)
        for j in range(levels):
            if j > 0:
                h = self.dec_up[j](upsample_nearest(h, 2))
            h = self.dec_fuse[j](concat([h, skips[levels - 1 - j]], axis=1))
            h = self._inject(h, features, levels + 1 + j)
            h = self.dec_xattn[j](self.dec_res[j](h, emb), prompt)
        return self.conv_out(silu(h))


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


def validate_ablation(flags: Iterable[str]) -> Set[str]:
    flags = set(flags)
    unknown = sorted(flags - set(ABLATION_FLAGS))
    if unknown:
        raise ConfigurationError(f"Unknown ablation flags: {unknown}")
    if len(flags & set(FREEZE_FLAGS)) > 1:
        raise ConfigurationError(f"Freeze flags are mutually exclusive: {sorted(flags & set(FREEZE_FLAGS))}")
    return flags


class RestorationModel(Module):
    def __init__(self, cfg: ModelConfig, ablation: Iterable[str] = ()):
        super().__init__()
        self.cfg = cfg
        self.ablation = validate_ablation(ablation)
        init = Initializer(cfg.init_seed)
        self.sdrm = self.add_child("sdrm", SDRM(init, cfg, self.ablation))
        self.mfem = self.add_child("mfem", MFEM(init, cfg, self.ablation))
        self.ttpm = self.add_child("ttpm", TTPM(init, cfg, self.ablation))
        self.denoiser = self.add_child("denoiser", Denoiser(init, cfg))
        self._parameters = OrderedDict(self.named_parameters())
        self.phase: Optional[str] = None
        logger.debug(f"RestorationModel with {self.num_parameters()} parameters, ablation={sorted(self.ablation)}")

    # -- geometry -------------------------------------------------------------

    def latent_shape(self, x_lq: Tensor) -> Tuple[int, int, int, int]:
        n, _, height, width = x_lq.shape
        f = self.cfg.latent_factor
        return (n, self.cfg.latent_channels, height // f, width // f)

    def encode(self, x: Tensor) -> Tensor:
        return latent_encode(x, self.cfg.latent_factor)

    def decode(self, z: Tensor) -> Tensor:
        return latent_decode(z, self.cfg.latent_factor)

    # -- forward --------------------------------------------------------------

    @staticmethod
    def _batch_steps(t: Timesteps, n: int) -> np.ndarray:
        steps = np.asarray(t, dtype=np.int64)
        if steps.ndim == 0:
            return np.full(n, int(steps), dtype=np.int64)
        if steps.shape != (n,):
            raise DimensionError(f"Expected one timestep or {n}, got shape {steps.shape}")
        return steps

    def conditioning(self, z_t: Tensor, t: Timesteps, x_lq: Tensor) -> Tuple[List[Tensor], Tensor]:
        """(MFEM features, prompt) for the current latent and timestep"""
        steps = self._batch_steps(t, z_t.shape[0])
        emb = self.sdrm.time_embed(steps)
        f1 = self.sdrm(x_lq, z_t, emb)
        return self.mfem(f1, emb), self.ttpm(emb)

    def predict_eps(self, z_t: Tensor, t: Timesteps, x_lq: Optional[Tensor]) -> Tensor:
        """Conditioned noise prediction; x_lq=None runs the unconditional prior path"""
        n = z_t.shape[0]
        steps = self._batch_steps(t, n)
        if x_lq is None:
            prompt = Tensor(np.zeros((n, self.cfg.prompt_len, self.cfg.prompt_dim)), dtype=z_t.dtype)
            return self.denoiser(z_t, steps, None, prompt)
        if x_lq.shape[0] != n:
            raise DimensionError(f"Batch of x_lq ({x_lq.shape[0]}) differs from z_t ({n})")
        features, prompt = self.conditioning(z_t, steps, x_lq)
        return self.denoiser(z_t, steps, features, prompt)

    # -- parameters and phases ------------------------------------------------

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._parameters

    def num_parameters(self) -> int:
        return sum(p.size for p in self._parameters.values())

    def trainable_names(self, phase: str) -> Set[str]:
        names = set(self._parameters)
        denoiser = {n for n in names if n.startswith("denoiser.")}
        conditioning = names - denoiser
        if phase == "prior":
            trainable = set(denoiser)
        elif phase == "phase1":
            trainable = set(conditioning)
        elif phase == "phase2":
            if "freeze_all" in self.ablation:
                trainable = set(conditioning)
            elif "unfreeze_all" in self.ablation:
                trainable = conditioning | denoiser
            elif "unfreeze_encoder" in self.ablation:
                trainable = conditioning | {n for n in denoiser if n.startswith("denoiser.encoder.")}
            else:
                trainable = conditioning | {n for n in denoiser if n.startswith("denoiser.decoder.")}
        else:
            raise UsageError(f"Unknown training phase '{phase}', expected one of {PHASES}")
        # parameters that an ablation leaves outside the forward pass never get a grad
        if "fixed_prompt" in self.ablation:
            trainable = {n for n in trainable if not n.startswith("ttpm.")}
        elif "ttpm_no_time" in self.ablation:
            trainable = {n for n in trainable if not n.startswith("ttpm.attn.")}
        return trainable

    def set_phase(self, phase: str) -> Set[str]:
        trainable = self.trainable_names(phase)
        for name, tensor in self._parameters.items():
            tensor.requires_grad = name in trainable
            tensor.zero_grad()
        self.phase = phase
        logger.info(f"Phase {phase}: {len(trainable)} of {len(self._parameters)} parameter tensors trainable")
        return trainable

    def freeze(self) -> None:
        for tensor in self._parameters.values():
            tensor.requires_grad = False

    def zero_grad(self) -> None:
        for tensor in self._parameters.values():
            tensor.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, tensor.data.copy()) for name, tensor in self._parameters.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._parameters) - set(state))
        unexpected = sorted(set(state) - set(self._parameters))
        if missing or unexpected:
            raise ConfigurationError(f"State does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, tensor in self._parameters.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} differs from model shape {tensor.shape}")
        for name, tensor in self._parameters.items():
            tensor.data[...] = state[name]


def restore(
    model: RestorationModel,
    x_lq: np.ndarray,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    progress: bool = False,
) -> np.ndarray:
    """Restore one uint8 [H,W,3] image (or a [N,H,W,3] batch) by DDIM sampling"""
    images = np.asarray(x_lq)
    batched = images.ndim == 4
    size = model.cfg.image_size
    if images.dtype != np.uint8 or images.shape[-3:] != (size, size, 3):
        raise UsageError(f"Expected uint8 images of shape ({size}, {size}, 3), got {images.dtype} {images.shape}")
    x = image_to_tensor(images)
    z0 = ddim_sample(model, x, sched, cfg, progress=progress)
    restored = tensor_to_image(model.decode(z0))
    return restored if batched else restored[0]
