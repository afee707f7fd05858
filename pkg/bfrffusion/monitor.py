"""
Training monitor backed by Weights & Biases.

The run is only created when monitoring is enabled and an API key is
configured; otherwise every call is a no-op and training proceeds offline.
"""

import logging
import os
from typing import Any, Dict, Optional

import wandb
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_PROJECT = "bfrffusion"


class TrainingMonitor:
    """Logs loss / lr / phase per iteration to a wandb run when available"""

    def __init__(self, enabled: bool = False, config: Optional[Dict[str, Any]] = None, run_name: Optional[str] = None):
        self.run = None
        if enabled:
            self._initialize_wandb(config or {}, run_name)

    def _initialize_wandb(self, config: Dict[str, Any], run_name: Optional[str]) -> None:
        try:
            if os.getenv("WANDB_MODE") == "disabled":
                logger.info("WANDB_MODE=disabled - skipping W&B initialization")
                return
            if not os.getenv("WANDB_API_KEY") and os.getenv("WANDB_MODE") != "offline":
                logger.info("W&B API key not configured - skipping W&B initialization")
                return
            self.run = wandb.init(
                project=os.getenv("WANDB_PROJECT", DEFAULT_PROJECT),
                entity=os.getenv("WANDB_ENTITY"),
                job_type="train",
                name=run_name,
                config=config,
            )
            logger.info("W&B initialized successfully")
        except Exception as e:
            logger.warning(f"W&B initialization failed: {e} - continuing without monitoring")
            self.run = None

    @property
    def active(self) -> bool:
        return self.run is not None

    def log_iteration(self, iteration: int, phase: str, lr: float, loss: float) -> None:
        if not self.run:
            return
        try:
            self.run.log({"loss": loss, "lr": lr, "phase": phase}, step=iteration)
        except Exception as e:
            logger.warning(f"W&B logging failed at iteration {iteration}: {e}")

    def log_summary(self, values: Dict[str, Any]) -> None:
        if not self.run:
            return
        for key, value in values.items():
            self.run.summary[key] = value

    def finish(self) -> None:
        if self.run:
            self.run.finish()
            self.run = None
