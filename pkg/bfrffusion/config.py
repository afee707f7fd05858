"""
Run configuration: one JSON document with model, train, degrade, sample and
paths sections. Unknown keys are rejected and every default is materialized
into the run directory.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

SEED_ENV = "BFR_SEED"
CONFIG_FILENAME = "config.json"
MAX_SEED = 2 ** 64

ABLATION_FLAGS = (
    "pixel_unshuffle_sdrm",
    "no_noise_zt",
    "resblock_mfem",
    "mfem_no_time",
    "ttpm_no_time",
    "fixed_prompt",
    "no_pretrained",
    "freeze_all",
    "unfreeze_all",
    "unfreeze_encoder",
)
FREEZE_FLAGS = ("freeze_all", "unfreeze_all", "unfreeze_encoder")


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_size: int = Field(64, ge=2)
    latent_factor: int = Field(4, ge=2)
    base_channels: int = Field(32, ge=1)
    levels: int = Field(3, ge=1)
    heads: int = Field(2, ge=1)
    time_dim: int = Field(64, ge=2)
    prompt_len: int = Field(8, ge=1)
    prompt_dim: int = Field(64, ge=1)
    T: int = Field(1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ffn_expansion: int = Field(2, ge=1)
    init_seed: int = Field(0, ge=0, lt=MAX_SEED)

    @property
    def latent_channels(self) -> int:
        return 3 * self.latent_factor ** 2

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_factor

    @model_validator(mode="after")
    def check_geometry(self) -> "ModelConfig":
        f = self.latent_factor
        if f & (f - 1):
            raise ValueError(f"latent_factor must be a power of two, got {f}")
        stride = f * 2 ** (self.levels - 1)
        if self.image_size % stride:
            raise ValueError(f"image_size {self.image_size} must be divisible by latent_factor*2^(levels-1) = {stride}")
        if self.base_channels % self.heads:
            raise ValueError(f"base_channels {self.base_channels} must be divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ValueError(f"time_dim must be even, got {self.time_dim}")
        if not 0 <= self.beta_start <= self.beta_end < 1:
            raise ValueError(f"Need 0 <= beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prior_iters: int = Field(500, ge=0)
    phase1_iters: int = Field(1000, ge=0)
    phase2_iters: int = Field(1000, ge=0)
    batch_size: int = Field(4, ge=1)
    lr0: float = Field(1e-4, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    weight_decay: float = Field(0.01, ge=0)
    adam_eps: float = Field(1e-8, gt=0)
    cosine_tail_iters: int = Field(500, ge=0)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    checkpoint_every: int = Field(500, ge=1)
    seed: int = Field(0, ge=0, lt=MAX_SEED)
    workers: int = Field(0, ge=0)
    wandb: bool = False
    ablation: List[str] = Field(default_factory=list)

    @field_validator("ablation")
    @classmethod
    def check_ablation(cls, flags: List[str]) -> List[str]:
        unknown = sorted(set(flags) - set(ABLATION_FLAGS))
        if unknown:
            raise ValueError(f"Unknown ablation flags {unknown}; known: {list(ABLATION_FLAGS)}")
        freeze = [f for f in flags if f in FREEZE_FLAGS]
        if len(set(freeze)) > 1:
            raise ValueError(f"Freeze flags are mutually exclusive, got {freeze}")
        return sorted(set(flags))

    @property
    def effective_prior_iters(self) -> int:
        return 0 if "no_pretrained" in self.ablation else self.prior_iters

    @property
    def total_iters(self) -> int:
        return self.effective_prior_iters + self.phase1_iters + self.phase2_iters


class DegradeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma_range: Tuple[float, float] = (0.2, 10.0)
    r_range: Tuple[int, int] = (1, 8)
    delta_range: Tuple[float, float] = (0.0, 15.0)
    q_range: Tuple[int, int] = (60, 100)
    seed: int = Field(0, ge=0, lt=MAX_SEED)
    parallelism: int = Field(1, ge=1)
    test_mode: bool = False
    skip_jpeg: bool = False
    min_sharpness: Optional[float] = None

    @model_validator(mode="after")
    def check_ranges(self) -> "DegradeConfig":
        limits = {
            "sigma_range": (0.2, 10.0),
            "r_range": (1, 8),
            "delta_range": (0.0, 15.0),
            "q_range": (60, 100),
        }
        for name, (lo_limit, hi_limit) in limits.items():
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} lower bound {lo} exceeds upper bound {hi}")
            if not self.test_mode and (lo < lo_limit or hi > hi_limit):
                raise ValueError(f"{name} {[lo, hi]} outside [{lo_limit}, {hi_limit}]; set test_mode to widen")
        if self.r_range[0] < 1 or self.sigma_range[0] < 0 or self.delta_range[0] < 0:
            raise ValueError("sigma/delta must be >= 0 and r >= 1")
        if not 1 <= self.q_range[0] <= self.q_range[1] <= 100:
            raise ValueError(f"q_range must lie within 1..100, got {self.q_range}")
        if self.skip_jpeg and not self.test_mode:
            raise ValueError("skip_jpeg requires test_mode")
        return self


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_steps: int = Field(50, ge=1)
    eta: float = Field(0.0, ge=0, le=1)
    seed: int = Field(0, ge=0, lt=MAX_SEED)


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: Optional[str] = None
    out: Optional[str] = None
    checkpoint: Optional[str] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    degrade: DegradeConfig = Field(default_factory=DegradeConfig)
    sample: SamplerConfig = Field(default_factory=SamplerConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def materialize(self, out_dir: Union[str, Path]) -> Path:
        """Write the fully populated config into the run directory"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / CONFIG_FILENAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path


def apply_seed_override(config: RunConfig, seed: int) -> None:
    if not 0 <= seed < MAX_SEED:
        raise ConfigurationError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    config.train.seed = seed
    config.degrade.seed = seed
    config.sample.seed = seed


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load and validate a RunConfig.

    A missing path yields all defaults. BFR_SEED (from the environment or a
    .env file) overrides every seed in the document.
    """
    load_dotenv()
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc

    try:
        config = RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigurationError(f"Invalid configuration: {exc}") from exc

    seed_env = os.getenv(SEED_ENV)
    if seed_env:
        try:
            seed = int(seed_env)
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got '{seed_env}'") from None
        apply_seed_override(config, seed)
        logger.info(f"{SEED_ENV}={seed} overrides all configured seeds")
    return config
