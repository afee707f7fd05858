"""
Phased optimisation of the restoration model.

    prior   denoiser alone, unconditional (stands in for a pretrained prior)
    phase1  denoiser frozen; SDRM / MFEM / TTPM train
    phase2  additionally unfreeze denoiser.decoder.* (or per ablation flag)

AdamW with decoupled weight decay, a cosine tail on the learning rate,
global-norm clipping, periodic checkpoints and a loss CSV.
"""

import logging
import math
import queue
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .autodiff import Tensor, backward, no_grad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .degradation import DatasetManifest, read_image
from .diffusion import NoiseSchedule, diffusion_loss
from .errors import ConfigurationError, NaNLossError, UsageError
from .monitor import TrainingMonitor
from .restoration_net import RestorationModel, image_to_tensor

logger = logging.getLogger(__name__)

LOSS_CSV = "loss.csv"
LOSS_COLUMNS = ["iter", "phase", "lr", "loss"]
LAST_CHECKPOINT = "last.bin"
NAN_CHECKPOINT = "nan_abort.bin"


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


def adamw_step(params: Dict[str, Tensor], state: AdamWState, lr: float, cfg: TrainConfig) -> None:
    """
    One decoupled-weight-decay Adam update over every trainable tensor.

    theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)

    Step counts are per parameter, so tensors unfrozen later start their own
    bias correction. Frozen tensors are skipped entirely.
    """
    b1, b2 = cfg.beta1, cfg.beta2
    for name, param in params.items():
        if not param.requires_grad:
            continue
        if param.grad is None:
            raise UsageError(f"Missing gradient for unfrozen parameter {name}")
        grad = param.grad
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        step = state.steps.get(name, 0) + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        update = lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * param.data)
        param.data -= update.astype(param.dtype, copy=False)
        state.m[name], state.v[name], state.steps[name] = m, v, step


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Scale trainable grads so their global L2 norm is at most max_norm; returns the norm before clipping"""
    grads = [p.grad for p in params.values() if p.requires_grad and p.grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        factor = max_norm / (total + 1e-6)
        for param in params.values():
            if param.requires_grad and param.grad is not None:
                param.grad = param.grad * param.grad.dtype.type(factor)
    return total


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """lr0 until the cosine tail, then lr0 * 0.5 * (1 + cos(pi * progress)) down to 0 at the final iteration"""
    total = cfg.total_iters
    if not 0 <= iteration < total:
        raise UsageError(f"Iteration {iteration} outside [0, {total})")
    tail = min(cfg.cosine_tail_iters, total)
    tail_start = total - tail
    if tail == 0 or iteration < tail_start:
        return cfg.lr0
    if tail == 1:
        return 0.0
    progress = (iteration - tail_start) / (tail - 1)
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))


def phase_at(iteration: int, cfg: TrainConfig) -> str:
    prior = cfg.effective_prior_iters
    if iteration < prior:
        return "prior"
    if iteration < prior + cfg.phase1_iters:
        return "phase1"
    return "phase2"


@dataclass
class Batch:
    indices: np.ndarray
    t: np.ndarray
    eps: np.ndarray


class BatchSampler:
    """Draws (image indices, timesteps, noise) from one seeded generator"""

    def __init__(self, rng: np.random.Generator, dataset_size: int, batch_size: int, T: int, latent_shape: tuple):
        self.rng = rng
        self.dataset_size, self.batch_size, self.T = dataset_size, batch_size, T
        self.latent_shape = latent_shape

    def draw(self) -> Batch:
        indices = self.rng.integers(0, self.dataset_size, size=self.batch_size)
        t = self.rng.integers(0, self.T, size=self.batch_size)
        eps = self.rng.standard_normal((self.batch_size,) + self.latent_shape)
        return Batch(indices=indices, t=t, eps=eps)


class PrefetchSampler:
    """One producer thread fills a bounded queue ahead of the training loop"""

    THREAD_NAME = "batch-prefetch"

    def __init__(self, sampler: BatchSampler, count: int, depth: int):
        self._queue: "queue.Queue[Batch]" = queue.Queue(maxsize=max(depth, 1))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, args=(sampler, count), name=self.THREAD_NAME, daemon=True)
        self._thread.start()

    def _produce(self, sampler: BatchSampler, count: int) -> None:
        for _ in range(count):
            batch = sampler.draw()
            while not self._stop.is_set():
                try:
                    self._queue.put(batch, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if self._stop.is_set():
                return

    def draw(self) -> Batch:
        return self._queue.get()

    def close(self) -> None:
        self._stop.set()
        self._thread.join()


class Trainer:
    """Owns the dataset arrays, optimizer state and run directory of one training run"""

    def __init__(
        self,
        model: RestorationModel,
        dataset: DatasetManifest,
        sched: NoiseSchedule,
        cfg: TrainConfig,
        out_dir: Union[str, Path],
        monitor: Optional[TrainingMonitor] = None,
        progress: bool = True,
    ):
        if len(dataset) == 0:
            raise UsageError("Training needs a non-empty dataset")
        if sched.T != model.cfg.T:
            raise ConfigurationError(f"Schedule has T={sched.T} but the model expects T={model.cfg.T}")
        self.model, self.sched, self.cfg = model, sched, cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.monitor = monitor or TrainingMonitor(enabled=False)
        self.progress = progress

        self.hq = np.stack([read_image(dataset.hq_file(e)) for e in dataset])
        self.lq = np.stack([read_image(dataset.lq_file(e)) for e in dataset])
        size = model.cfg.image_size
        if self.hq.shape[1:] != (size, size, 3) or self.lq.shape != self.hq.shape:
            raise ConfigurationError(f"Dataset images {self.hq.shape[1:]} do not match image_size {size}")

        self.rng = np.random.default_rng(cfg.seed)
        self.state = AdamWState()
        self.iteration = 0
        self.history: List[Dict[str, object]] = []
        f = model.cfg.latent_factor
        self.latent_shape = (model.cfg.latent_channels, size // f, size // f)

    # -- checkpoints ----------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        params = self.model.parameters()
        return Checkpoint(
            tensors=self.model.state_dict(),
            iteration=self.iteration,
            phase=phase_at(min(self.iteration, max(self.cfg.total_iters - 1, 0)), self.cfg),
            seed=self.cfg.seed,
            m={k: val for k, val in self.state.m.items() if k in params},
            v={k: val for k, val in self.state.v.items() if k in params},
            adam_steps=dict(self.state.steps),
            rng_state=self.rng.bit_generator.state,
            extra={"model": self.model.cfg.model_dump(mode="json"), "ablation": sorted(self.model.ablation)},
        )

    def save(self, name: Optional[str] = None) -> Path:
        ckpt = self.checkpoint()
        path = save_checkpoint(self.out_dir / (name or f"ckpt_{self.iteration}.bin"), ckpt)
        if name is None:
            save_checkpoint(self.out_dir / LAST_CHECKPOINT, ckpt)
        self.write_loss_csv()
        logger.info(f"Checkpoint at iteration {self.iteration}: {path}")
        return path

    def resume(self, path: Union[str, Path]) -> None:
        ckpt = load_checkpoint(path)
        self.model.load_state_dict(ckpt.tensors)
        self.state = AdamWState(
            m={k: val.astype(self.model.parameters()[k].dtype) for k, val in ckpt.m.items()},
            v={k: val.astype(self.model.parameters()[k].dtype) for k, val in ckpt.v.items()},
            steps=dict(ckpt.adam_steps),
        )
        self.iteration = ckpt.iteration
        if ckpt.rng_state is not None:
            self.rng.bit_generator.state = ckpt.rng_state
        csv_path = self.out_dir / LOSS_CSV
        if csv_path.is_file():
            frame = pd.read_csv(csv_path)
            self.history = frame[frame["iter"] < self.iteration].to_dict("records")
        logger.info(f"Resumed from {path} at iteration {self.iteration}")

    def write_loss_csv(self) -> Path:
        path = self.out_dir / LOSS_CSV
        pd.DataFrame(self.history, columns=LOSS_COLUMNS).to_csv(path, index=False)
        return path

    # -- loop -----------------------------------------------------------------

    def _batches(self, count: int) -> Iterator[Batch]:
        sampler = BatchSampler(self.rng, len(self.hq), self.cfg.batch_size, self.sched.T, self.latent_shape)
        if self.cfg.workers == 0:
            for _ in range(count):
                yield sampler.draw()
            return
        source = PrefetchSampler(sampler, count, 2 * self.cfg.workers)
        try:
            for _ in range(count):
                yield source.draw()
        finally:
            source.close()

    def _reset_moments(self, names: Set[str]) -> None:
        """Tensors rejoining the trainable set start fresh moments and bias correction"""
        for name in names:
            self.state.m.pop(name, None)
            self.state.v.pop(name, None)
            self.state.steps.pop(name, None)
        if names:
            logger.info(f"Reset AdamW state of {len(names)} newly trainable tensors")

    def step(self, batch: Batch) -> float:
        model, cfg = self.model, self.cfg
        phase = phase_at(self.iteration, cfg)
        if model.phase != phase:
            model.set_phase(phase)
        if self.iteration > 0:
            previous = phase_at(self.iteration - 1, cfg)
            if previous != phase:
                self._reset_moments(model.trainable_names(phase) - model.trainable_names(previous))

        with no_grad():
            z = model.encode(image_to_tensor(self.hq[batch.indices]))
        x_lq = None if phase == "prior" else image_to_tensor(self.lq[batch.indices])
        eps = Tensor(batch.eps, dtype=z.dtype)
        loss = diffusion_loss(model, z, x_lq, batch.t, eps, self.sched)
        value = loss.item()
        if not math.isfinite(value):
            path = self.save(NAN_CHECKPOINT)
            raise NaNLossError(self.iteration, str(path))

        params = model.parameters()
        model.zero_grad()
        backward(loss)
        if cfg.grad_clip:
            clip_grad_norm(params, cfg.grad_clip)
        lr = lr_at(self.iteration, cfg)
        adamw_step(params, self.state, lr, cfg)

        self.history.append({"iter": self.iteration, "phase": phase, "lr": lr, "loss": value})
        self.monitor.log_iteration(self.iteration, phase, lr, value)
        logger.debug(f"iter {self.iteration} [{phase}] lr {lr:.3e} loss {value:.5f}")
        self.iteration += 1
        return value

    def run(self, until: Optional[int] = None) -> Checkpoint:
        """Train up to `until` iterations (default: the configured total)"""
        total = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        remaining = max(total - self.iteration, 0)
        logger.info(f"Training iterations {self.iteration}..{total} in {self.out_dir}")
        bar = tqdm(total=remaining, desc="train", disable=not self.progress)
        batches = self._batches(remaining)
        try:
            for batch in batches:
                value = self.step(batch)
                bar.update(1)
                bar.set_postfix(loss=f"{value:.4f}", phase=phase_at(self.iteration - 1, self.cfg))
                if self.iteration % self.cfg.checkpoint_every == 0 or self.iteration == total:
                    self.save()
        finally:
            batches.close()
            bar.close()
        if remaining == 0:
            self.write_loss_csv()
        return self.checkpoint()


def train(
    model: RestorationModel,
    dataset: DatasetManifest,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path]] = None,
    monitor: Optional[TrainingMonitor] = None,
    progress: bool = True,
) -> Checkpoint:
    trainer = Trainer(model, dataset, sched, cfg, out_dir, monitor=monitor, progress=progress)
    if resume is not None:
        trainer.resume(resume)
    ckpt = trainer.run()
    if trainer.history:
        trainer.monitor.log_summary({"final_loss": trainer.history[-1]["loss"], "iterations": trainer.iteration})
    return ckpt
