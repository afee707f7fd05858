#!/usr/bin/env python3
"""
Command line entry point.

    bfr.py degrade   --hq-dir DIR --out-dir DIR [--seed N] [--parallelism N]
    bfr.py train     --manifest FILE --out-dir DIR [--resume CKPT] [--workers N]
    bfr.py restore   --checkpoint CKPT --lq-dir DIR --out-dir DIR [--seed N]
    bfr.py eval      --restored-dir DIR --hq-dir DIR --out-dir DIR
    bfr.py gradcheck [--tolerance 1e-3]
    bfr.py ablate    --manifest FILE --out-dir DIR [--configs a b ...]

Exit codes: 0 success, 1 gradcheck failure, 2 configuration/usage error,
3 I/O error, 4 NaN-loss abort.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from .checkpoint import load_checkpoint
from .config import ModelConfig, RunConfig, load_run_config
from .degradation import LQ_SUBDIR, MANIFEST_NAME, load_manifest, read_image, synthesize_dataset, write_image
from .diffusion import build_schedule
from .errors import BFRError, CheckpointFormatError, NaNLossError, UsageError
from .gradcheck_suite import DEFAULT_TOLERANCE, run_gradcheck_suite
from .metrics import evaluate_dirs, evaluate_pairs
from .monitor import TrainingMonitor
from .restoration_net import RestorationModel, restore
from .training import train

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NAN = 4

# Ablation configurations by letter; "k" is the full model
ABLATIONS: Dict[str, List[str]] = {
    "a": ["pixel_unshuffle_sdrm"],
    "b": ["no_noise_zt"],
    "c": ["resblock_mfem"],
    "d": ["mfem_no_time"],
    "e": ["ttpm_no_time"],
    "f": ["fixed_prompt"],
    "g": ["no_pretrained"],
    "h": ["freeze_all"],
    "i": ["unfreeze_all"],
    "j": ["unfreeze_encoder"],
    "k": [],
}
ABLATION_CSV = "ablation.csv"
METRICS_CSV = "metrics.csv"


def _out_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    out = args.out_dir or config.paths.out
    if not out:
        raise UsageError("No output directory: pass --out-dir or set paths.out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest_path(args: argparse.Namespace, config: RunConfig) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if config.paths.data:
        return Path(config.paths.data) / MANIFEST_NAME
    raise UsageError("No dataset: pass --manifest or set paths.data")


def _model_from_checkpoint(ckpt_path: Path, config: RunConfig) -> RestorationModel:
    ckpt = load_checkpoint(ckpt_path)
    model_cfg = config.model
    if "model" in ckpt.extra:
        model_cfg = ModelConfig.model_validate(ckpt.extra["model"])
        config.model = model_cfg
    model = RestorationModel(model_cfg, ckpt.extra.get("ablation", []))
    model.load_state_dict(ckpt.tensors)
    model.freeze()
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_degrade(args: argparse.Namespace, config: RunConfig) -> int:
    if args.seed is not None:
        config.degrade.seed = args.seed
    if args.parallelism is not None:
        config.degrade.parallelism = args.parallelism
    hq_dir = args.hq_dir or config.paths.data
    if not hq_dir:
        raise UsageError("No HQ directory: pass --hq-dir or set paths.data")
    out_dir = _out_dir(args, config)
    config.materialize(out_dir)

    d = config.degrade
    manifest = synthesize_dataset(
        hq_dir,
        out_dir,
        master_seed=d.seed,
        parallelism=d.parallelism,
        sigma_range=d.sigma_range,
        r_range=d.r_range,
        delta_range=d.delta_range,
        q_range=d.q_range,
        skip_jpeg=d.skip_jpeg,
        min_sharpness=d.min_sharpness,
        progress=not args.quiet,
    )
    print(f"✅ Degraded {len(manifest)} images -> {out_dir / MANIFEST_NAME}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    if args.workers is not None:
        config.train.workers = args.workers
    out_dir = _out_dir(args, config)
    manifest = load_manifest(_manifest_path(args, config))
    config.materialize(out_dir)

    model = RestorationModel(config.model, config.train.ablation)
    sched = build_schedule(config.model.T, config.model.beta_start, config.model.beta_end)
    monitor = TrainingMonitor(enabled=config.train.wandb, config=config.model_dump(mode="json"), run_name=out_dir.name)
    try:
        ckpt = train(model, manifest, sched, config.train, out_dir, resume=args.resume, monitor=monitor,
                     progress=not args.quiet)
    finally:
        monitor.finish()
    print(f"✅ Trained {ckpt.iteration} iterations -> {out_dir}")
    return EXIT_OK


def cmd_restore(args: argparse.Namespace, config: RunConfig) -> int:
    if args.seed is not None:
        config.sample.seed = args.seed
    ckpt_path = args.checkpoint or config.paths.checkpoint
    if not ckpt_path:
        raise UsageError("No checkpoint: pass --checkpoint or set paths.checkpoint")
    lq_dir = Path(args.lq_dir or Path(config.paths.data or ".") / LQ_SUBDIR)
    if not lq_dir.is_dir():
        raise FileNotFoundError(f"LQ directory not found: {lq_dir}")
    out_dir = _out_dir(args, config)

    model = _model_from_checkpoint(Path(ckpt_path), config)
    config.materialize(out_dir)
    sched = build_schedule(config.model.T, config.model.beta_start, config.model.beta_end)
    paths = sorted(p for p in lq_dir.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise UsageError(f"No PNG images in {lq_dir}")
    for path in paths:
        write_image(out_dir / path.name, restore(model, read_image(path), sched, config.sample))
        logger.info(f"Restored {path.name}")
    print(f"✅ Restored {len(paths)} images -> {out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    out_dir = _out_dir(args, config)
    config.materialize(out_dir)
    report = evaluate_dirs(args.restored_dir, args.hq_dir)
    csv_path = report.write_csv(out_dir / METRICS_CSV)
    print(f"📊 PSNR {report.mean_psnr:.2f} dB | SSIM {report.mean_ssim:.4f} | sharpness {report.mean_sharpness:.1f}")
    print(f"✅ Metrics written to {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, config: RunConfig) -> int:
    results = run_gradcheck_suite(seed=config.train.seed)
    for name, error in results.items():
        flag = "✅" if error < args.tolerance else "❌"
        print(f"{flag} {name:<20} {error:.3e}")
    worst = max(results.values())
    print(f"max relative error: {worst:.3e}")
    return EXIT_OK if worst < args.tolerance else EXIT_GRADCHECK


def cmd_ablate(args: argparse.Namespace, config: RunConfig) -> int:
    out_dir = _out_dir(args, config)
    manifest = load_manifest(_manifest_path(args, config))
    keys = args.configs or list(ABLATIONS)
    unknown = [k for k in keys if k not in ABLATIONS]
    if unknown:
        raise UsageError(f"Unknown ablation configurations {unknown}; choose from {list(ABLATIONS)}")
    config.materialize(out_dir)
    sched = build_schedule(config.model.T, config.model.beta_start, config.model.beta_end)
    hq = [read_image(manifest.hq_file(e)) for e in manifest]
    lq = [read_image(manifest.lq_file(e)) for e in manifest]

    rows = []
    for key in keys:
        flags = ABLATIONS[key]
        train_cfg = config.train.model_copy(update={"ablation": sorted(flags)})
        model = RestorationModel(config.model, flags)
        run_dir = out_dir / key
        train(model, manifest, sched, train_cfg, run_dir, progress=not args.quiet)
        history = pd.read_csv(run_dir / "loss.csv")
        restored = [restore(model, image, sched, config.sample) for image in lq]
        report = evaluate_pairs((e.lq_path, r, h) for e, r, h in zip(manifest, restored, hq))
        rows.append({
            "config": key,
            "flags": "+".join(flags) or "full",
            "psnr": report.mean_psnr,
            "ssim": report.mean_ssim,
            "final_loss": float(history["loss"].iloc[-1]) if len(history) else float("nan"),
        })
        logger.info(f"Ablation ({key}) {rows[-1]}")
    pd.DataFrame(rows, columns=["config", "flags", "psnr", "ssim", "final_loss"]).to_csv(
        out_dir / ABLATION_CSV, index=False)
    print(f"✅ Ablation report written to {out_dir / ABLATION_CSV}")
    return EXIT_OK


COMMANDS = {
    "degrade": cmd_degrade,
    "train": cmd_train,
    "restore": cmd_restore,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bfr", description="Desk-scale diffusion blind face restoration")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out-dir", dest="out_dir", help="Run directory for every output")
    common.add_argument("--log-level", dest="log_level", default=os.getenv("BFR_LOG_LEVEL", "INFO"))
    common.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", parents=[common], help="Synthesize LQ images and a manifest")
    p.add_argument("--hq-dir", dest="hq_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--parallelism", type=int)

    p = sub.add_parser("train", parents=[common], help="Run the phased training loop")
    p.add_argument("--manifest")
    p.add_argument("--resume")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("restore", parents=[common], help="Restore LQ images from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--lq-dir", dest="lq_dir")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", parents=[common], help="PSNR / SSIM / sharpness CSV")
    p.add_argument("--restored-dir", dest="restored_dir", required=True)
    p.add_argument("--hq-dir", dest="hq_dir", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    p = sub.add_parser("ablate", parents=[common], help="Train and score ablation configurations")
    p.add_argument("--manifest")
    p.add_argument("--configs", nargs="*", help=f"Subset of {list(ABLATIONS)}")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG

    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_run_config(args.config)
        return COMMANDS[args.command](args, config)
    except NaNLossError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointFormatError as exc:
        print(f"❌ Checkpoint error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BFRError, ValidationError, ValueError) as exc:
        if isinstance(exc, OSError):
            print(f"❌ I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"❌ Configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"❌ I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
