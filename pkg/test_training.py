#!/usr/bin/env python3
"""
Test AdamW, the learning-rate schedule, phase freezing and the training loop
"""

import math
import threading

import numpy as np
import pandas as pd
import pytest

from bfrffusion.autodiff import Tensor
from bfrffusion.checkpoint import load_checkpoint
from bfrffusion.config import ModelConfig, SamplerConfig, TrainConfig
from bfrffusion.degradation import DatasetManifest, read_image, synthesize_dataset
from bfrffusion.diffusion import build_schedule
from bfrffusion.errors import ConfigurationError, NaNLossError, UsageError
from bfrffusion.metrics import evaluate_pairs
from bfrffusion.restoration_net import RestorationModel, restore
from bfrffusion.training import (
    LOSS_COLUMNS,
    LOSS_CSV,
    NAN_CHECKPOINT,
    AdamWState,
    BatchSampler,
    PrefetchSampler,
    Trainer,
    adamw_step,
    clip_grad_norm,
    lr_at,
    phase_at,
    train,
)


def scalar_param(value: float, grad: float) -> Tensor:
    param = Tensor([value], requires_grad=True)
    param.grad = np.array([grad], dtype=param.dtype)
    return param


def micro_trainer(micro_cfg, manifest, out_dir, **train_overrides):
    settings = dict(prior_iters=0, phase1_iters=4, phase2_iters=0, batch_size=2, cosine_tail_iters=0, checkpoint_every=2, seed=13)
    settings.update(train_overrides)
    model = RestorationModel(micro_cfg)
    return Trainer(model, manifest, build_schedule(micro_cfg.T), TrainConfig(**settings), out_dir, progress=False)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adamw_zero_grad_no_decay_keeps_parameter():
    param = scalar_param(1.5, 0.0)
    adamw_step({"p": param}, AdamWState(), 0.1, TrainConfig(weight_decay=0.0))
    assert param.item() == 1.5


def test_adamw_first_step_hand_value():
    param = scalar_param(1.0, 1.0)
    state = AdamWState()
    adamw_step({"p": param}, state, 0.1, TrainConfig(weight_decay=0.0))
    assert abs(param.item() - 0.9) < 1e-6
    assert state.steps["p"] == 1


def test_adamw_decay_only_path():
    param = scalar_param(2.0, 0.0)
    adamw_step({"p": param}, AdamWState(), 0.1, TrainConfig(weight_decay=0.01))
    assert abs(param.item() - 2.0 * (1 - 0.001)) < 1e-6


def test_adamw_skips_frozen_and_requires_grads():
    frozen = scalar_param(1.0, 5.0)
    frozen.requires_grad = False
    adamw_step({"f": frozen}, AdamWState(), 0.1, TrainConfig())
    assert frozen.item() == 1.0

    missing = Tensor([1.0], requires_grad=True)
    with pytest.raises(UsageError):
        adamw_step({"m": missing}, AdamWState(), 0.1, TrainConfig())


def test_clip_grad_norm():
    a, b = scalar_param(0.0, 3.0), scalar_param(0.0, 4.0)
    norm = clip_grad_norm({"a": a, "b": b}, 1.0)
    assert abs(norm - 5.0) < 1e-6
    clipped = math.hypot(a.grad.item(), b.grad.item())
    assert abs(clipped - 1.0) < 1e-5
    assert abs(a.grad.item() / b.grad.item() - 0.75) < 1e-6


# ---------------------------------------------------------------------------
# schedule and phases
# ---------------------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig(prior_iters=0, phase1_iters=10, phase2_iters=10, cosine_tail_iters=5, lr0=1e-3)
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(19, cfg) == 0.0
    assert abs(lr_at(17, cfg) - 5e-4) < 1e-15
    assert lr_at(14, cfg) == lr_at(15, cfg) == 1e-3
    tail = [lr_at(i, cfg) for i in range(15, 20)]
    assert all(x >= y for x, y in zip(tail, tail[1:]))
    with pytest.raises(UsageError):
        lr_at(20, cfg)


def test_lr_without_tail_is_constant():
    cfg = TrainConfig(prior_iters=0, phase1_iters=3, phase2_iters=0, cosine_tail_iters=0, lr0=2e-4)
    assert [lr_at(i, cfg) for i in range(3)] == [2e-4] * 3


def test_phase_boundaries():
    cfg = TrainConfig(prior_iters=2, phase1_iters=3, phase2_iters=1)
    assert [phase_at(i, cfg) for i in range(6)] == ["prior"] * 2 + ["phase1"] * 3 + ["phase2"]
    skipped = TrainConfig(prior_iters=2, phase1_iters=3, phase2_iters=1, ablation=["no_pretrained"])
    assert skipped.total_iters == 4
    assert phase_at(0, skipped) == "phase1"


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


CONDITIONING = ("sdrm.", "mfem.", "ttpm.")


def test_default_schedule_starts_with_a_prior_phase():
    cfg = TrainConfig()
    assert cfg.prior_iters > 0
    assert phase_at(0, cfg) == "prior"
    assert cfg.total_iters != TrainConfig(ablation=["no_pretrained"]).total_iters


def test_phase1_keeps_denoiser_bit_identical(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", prior_iters=20, phase1_iters=100,
                            checkpoint_every=200)
    trainer.run(until=20)
    before = trainer.model.state_dict()
    trainer.run()
    after = trainer.model.state_dict()
    changed = [name for name in before if not np.array_equal(before[name], after[name])]
    assert changed
    assert not any(name.startswith("denoiser.") for name in changed)

    # weight decay alone would scale every tensor by this factor
    decay = (1 - trainer.cfg.lr0 * trainer.cfg.weight_decay) ** 100
    learned = [name for name in before if name.startswith(CONDITIONING)
               and np.max(np.abs(after[name] - before[name] * decay)) > 1e-5]
    assert learned


def conditioning_grads(model):
    return [p.grad for name, p in model.parameters().items() if name.startswith(CONDITIONING) and p.grad is not None]


def test_phase1_gradients_need_a_trained_prior(micro_cfg, toy_manifest, tmp_path):
    cold = micro_trainer(micro_cfg, toy_manifest, tmp_path / "cold", phase1_iters=1)
    cold.step(BatchSampler(cold.rng, 4, 2, micro_cfg.T, cold.latent_shape).draw())
    assert all(not np.any(g) for g in conditioning_grads(cold.model))

    warm = micro_trainer(micro_cfg, toy_manifest, tmp_path / "warm", prior_iters=3, phase1_iters=1)
    warm.run(until=3)
    warm.step(BatchSampler(warm.rng, 4, 2, micro_cfg.T, warm.latent_shape).draw())
    assert warm.model.phase == "phase1"
    assert any(np.any(g) for g in conditioning_grads(warm.model))


def test_phase2_restarts_bias_correction_for_unfrozen_decoder(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", prior_iters=3, phase1_iters=2,
                            phase2_iters=2, checkpoint_every=10)
    trainer.run(until=3)
    assert trainer.state.steps["denoiser.decoder.conv_out.weight"] == 3
    trainer.run()
    assert trainer.state.steps["denoiser.decoder.conv_out.weight"] == 2
    assert trainer.state.steps["denoiser.encoder.conv_in.weight"] == 3
    assert trainer.state.steps["sdrm.noise.weight"] == 4


def test_phase2_unfreezes_decoder_only(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", phase1_iters=0, phase2_iters=3)
    before = trainer.model.state_dict()
    trainer.run()
    after = trainer.model.state_dict()
    for name in before:
        if name.startswith("denoiser.encoder.") or name.startswith("denoiser.middle.") or name.startswith("denoiser.time_embed."):
            assert np.array_equal(before[name], after[name]), name
    assert not np.array_equal(before["denoiser.decoder.conv_out.weight"], after["denoiser.decoder.conv_out.weight"])


def test_prior_phase_trains_denoiser_only(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", prior_iters=2, phase1_iters=0)
    before = trainer.model.state_dict()
    trainer.run()
    after = trainer.model.state_dict()
    changed = {name for name in before if not np.array_equal(before[name], after[name])}
    assert changed and all(name.startswith("denoiser.") for name in changed)


def test_loss_csv_is_deterministic(micro_cfg, toy_manifest, tmp_path):
    for name in ("a", "b"):
        micro_trainer(micro_cfg, toy_manifest, tmp_path / name, phase1_iters=3, cosine_tail_iters=2).run()
    first = (tmp_path / "a" / LOSS_CSV).read_bytes()
    assert first == (tmp_path / "b" / LOSS_CSV).read_bytes()
    frame = pd.read_csv(tmp_path / "a" / LOSS_CSV)
    assert list(frame.columns) == LOSS_COLUMNS
    assert list(frame["iter"]) == [0, 1, 2]
    assert np.all(np.isfinite(frame["loss"]))
    assert frame["lr"].iloc[-1] == 0.0


def test_checkpoints_are_written(micro_cfg, toy_manifest, tmp_path):
    out = tmp_path / "run"
    ckpt = micro_trainer(micro_cfg, toy_manifest, out).run()
    assert ckpt.iteration == 4
    for name in ("ckpt_2.bin", "ckpt_4.bin", "last.bin"):
        assert (out / name).is_file()
    stored = load_checkpoint(out / "last.bin")
    assert stored.iteration == 4
    assert stored.extra["model"]["base_channels"] == micro_cfg.base_channels
    assert set(stored.m) == set(stored.v) and stored.m


def test_resume_reproduces_uninterrupted_losses(micro_cfg, toy_manifest, tmp_path):
    full = micro_trainer(micro_cfg, toy_manifest, tmp_path / "full")
    full.run()

    resumed = micro_trainer(micro_cfg, toy_manifest, tmp_path / "resumed")
    resumed.resume(tmp_path / "full" / "ckpt_2.bin")
    assert resumed.iteration == 2
    resumed.run()

    expected = [row["loss"] for row in full.history if row["iter"] >= 2]
    assert [row["loss"] for row in resumed.history] == expected
    for name, tensor in full.model.parameters().items():
        assert np.array_equal(tensor.data, resumed.model.parameters()[name].data), name


def test_nan_loss_aborts_with_diagnostic_checkpoint(micro_cfg, toy_manifest, tmp_path):
    out = tmp_path / "run"
    trainer = micro_trainer(micro_cfg, toy_manifest, out)
    trainer.model.parameters()["denoiser.encoder.conv_in.weight"].data[...] = np.nan
    with pytest.raises(NaNLossError) as excinfo:
        trainer.run()
    assert excinfo.value.iteration == 0
    assert (out / NAN_CHECKPOINT).is_file()


def test_nan_abort_stops_the_prefetch_thread(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", phase1_iters=50, workers=2)
    trainer.model.parameters()["denoiser.encoder.conv_in.weight"].data[...] = np.nan
    with pytest.raises(NaNLossError):
        trainer.run()
    assert not any(t.name == PrefetchSampler.THREAD_NAME and t.is_alive() for t in threading.enumerate())


def test_trainer_rejects_bad_inputs(micro_cfg, toy_manifest, tmp_path):
    model = RestorationModel(micro_cfg)
    with pytest.raises(UsageError):
        Trainer(model, DatasetManifest(), build_schedule(micro_cfg.T), TrainConfig(), tmp_path, progress=False)
    with pytest.raises(ConfigurationError):
        Trainer(model, toy_manifest, build_schedule(micro_cfg.T + 1), TrainConfig(), tmp_path, progress=False)
    wrong_size = RestorationModel(ModelConfig(**{**micro_cfg.model_dump(), "image_size": 16}))
    with pytest.raises(ConfigurationError):
        Trainer(wrong_size, toy_manifest, build_schedule(micro_cfg.T), TrainConfig(), tmp_path, progress=False)


def test_prefetch_workers_complete_the_run(micro_cfg, toy_manifest, tmp_path):
    trainer = micro_trainer(micro_cfg, toy_manifest, tmp_path / "run", workers=2)
    trainer.run()
    assert trainer.iteration == 4
    assert all(math.isfinite(row["loss"]) for row in trainer.history)


# ---------------------------------------------------------------------------
# smoke runs
# ---------------------------------------------------------------------------


SMOKE_MODEL = ModelConfig(image_size=64, latent_factor=4, base_channels=16, levels=2, heads=2, time_dim=32,
                          prompt_len=4, prompt_dim=32)


@pytest.mark.slow
def test_smoke_run_halves_the_loss_and_beats_degraded_inputs(tmp_path, image_writer):
    image_writer(tmp_path / "hq", 16, 64, seed=21)
    manifest = synthesize_dataset(tmp_path / "hq", tmp_path / "data", master_seed=1, sigma_range=(0.2, 3.0),
                                  r_range=(1, 4), delta_range=(0.0, 10.0), progress=False)
    cfg = TrainConfig(prior_iters=500, phase1_iters=500, phase2_iters=1000, batch_size=4, lr0=1e-3,
                      cosine_tail_iters=500, checkpoint_every=1000, seed=0)
    model = RestorationModel(SMOKE_MODEL)
    sched = build_schedule(SMOKE_MODEL.T)
    train(model, manifest, sched, cfg, tmp_path / "run", progress=False)

    losses = pd.read_csv(tmp_path / "run" / LOSS_CSV)["loss"].to_numpy()
    assert len(losses) == 2000
    assert np.all(np.isfinite(losses))
    assert losses[-100:].mean() <= 0.5 * losses[:100].mean()

    model.freeze()
    restored_pairs, degraded_pairs = [], []
    for entry in manifest.entries:
        hq, lq = read_image(manifest.hq_file(entry)), read_image(manifest.lq_file(entry))
        restored = restore(model, lq, sched, SamplerConfig(num_steps=50, seed=0))
        restored_pairs.append((entry.lq_path, restored, hq))
        degraded_pairs.append((entry.lq_path, lq, hq))
    restored_report, degraded_report = evaluate_pairs(restored_pairs), evaluate_pairs(degraded_pairs)
    assert len(restored_report.images) == 16
    assert restored_report.mean_psnr - degraded_report.mean_psnr >= 1.0


if __name__ == "__main__":
    print("🧪 Testing training loop...")
    raise SystemExit(pytest.main([__file__, "-v"]))
