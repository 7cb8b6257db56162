"""Command line entry point: ``gantransfer <command> [options]``.

Every command accepts ``--config PATH`` and repeatable ``--set key.path=value``
overrides. Failures print one JSON error record on stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, config as config_mod
from .backbone import map_noise, parameter_hash, sample_noise, synthesize
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import ImageDataset, image_grid, ingest_dataset, make_toy_domains, save_png
from .inversion import (
    PerceptualExtractor,
    default_cache_root,
    frozen_random_extractor,
    precompute_transforms,
    vgg16_extractor,
)
from .metrics import dump_discriminator_features, evaluate_fid, generate_images
from . import plotting
from .trainer import RunLog, pretrain, transfer

log = logging.getLogger("gantransfer")

EXIT_CONFIG = 2
EXIT_RUNTIME = 1


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# helpers


def make_extractor(cfg: RunConfig) -> PerceptualExtractor:
    if cfg.metrics.extractor == "frozen-random":
        return frozen_random_extractor(cfg.metrics.extractor_seed)
    if cfg.metrics.extractor == "vgg16":
        return vgg16_extractor()
    raise ConfigError([f"metrics.extractor: unknown extractor {cfg.metrics.extractor!r}"])


def _require(cfg: RunConfig, *keys: str):
    missing = [f"data.{k}: required for this command" for k in keys if getattr(cfg.data, k) is None]
    if missing:
        raise ConfigError(missing)


def _dataset(path: str, resolution: int) -> ImageDataset:
    ds = ingest_dataset(path, resolution)
    log.info("loaded %d images from %s", len(ds), path)
    return ds


def _write_manifest(out: Path, cfg: RunConfig, command: str, seed: int | None, **extra):
    manifest = {"command": command, "seed": seed, "run_config": config_mod.to_dict(cfg), **extra}
    path = out / "manifest.json"
    if path.exists():
        try:
            manifest = {**json.loads(path.read_text()), **manifest}
        except json.JSONDecodeError:
            pass
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _load_checkpoint(path: str):
    snap = checkpoint.load(path)
    log.info("checkpoint %s: role=%s step=%d hash=%s", path, snap.role, snap.step, parameter_hash(snap)[:16])
    return snap


def _with_seed(cfg: RunConfig, section: str, seed: int | None) -> RunConfig:
    if seed is None:
        return cfg
    data = config_mod.to_dict(cfg)
    data[section]["seed"] = seed
    return config_mod.from_dict(data)


# ---------------------------------------------------------------------------
# commands


def cmd_make_toys(args, cfg: RunConfig) -> dict:
    out = Path(args.out)
    src, tgt = make_toy_domains((args.n_source, args.n_target), args.seed or 0, out, cfg.network.resolution)
    return {"source": str(out / "source"), "target": str(out / "target"), "n_source": len(src), "n_target": len(tgt)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    _require(cfg, "source")
    cfg = _with_seed(cfg, "pretrain", args.seed)
    ds = _dataset(cfg.data.source, cfg.network.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extractor = make_extractor(cfg) if cfg.pretrain.eval_n_fake >= 2 else None
    result = pretrain(ds.images, cfg.network, cfg.pretrain, out_dir=out, extractor=extractor)
    ckpt = out / "source.ckpt"
    h = checkpoint.save(result.snapshot, ckpt)
    records = result.log.of_kind("step")
    if records:
        plotting.plot_losses(records, out / "losses.png", title="source pretraining")
    _write_manifest(out, cfg, "pretrain", cfg.pretrain.seed, checkpoint=ckpt.name, checkpoint_hash=h,
                    dataset_hash=ds.hash)
    return {"checkpoint": str(ckpt), "hash": h, "steps": result.snapshot.step}


def cmd_invert(args, cfg: RunConfig) -> dict:
    _require(cfg, "target")
    if not args.checkpoint:
        raise UsageError("--checkpoint (the source snapshot) is required")
    source = _load_checkpoint(args.checkpoint[0])
    ds = _dataset(cfg.data.target, source.config.resolution)
    seed = cfg.transfer.seed if args.seed is None else args.seed
    extractor = make_extractor(cfg)
    samples = precompute_transforms(list(ds.images), source, extractor, cfg.inversion, seed=seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recon = torch.cat([s.inversion.reconstruction for s in samples])
    pairs = torch.stack([ds.images, recon], dim=1).flatten(0, 1)
    save_png(image_grid(pairs[: 2 * min(32, len(samples))], ncol=8), out / "reconstructions.png")
    with (out / "inversion.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "item_hash", "pixel_loss", "pixel_mse", "perceptual_loss"])
        for name, s in zip(ds.names, samples):
            r = s.inversion
            w.writerow([name, s.item_hash, r.final_pixel_loss, r.pixel_mse, r.final_perceptual_loss])
    plotting.plot_inversion_traces(
        [s.inversion.loss_trace for s in samples if len(s.inversion.loss_trace)],
        out / "inversion_traces.png",
        cfg.inversion.segment_ends(),
    )
    _write_manifest(out, cfg, "invert", seed, source_hash=parameter_hash(source),
                    cache_root=str(default_cache_root()))
    return {"n": len(samples), "mean_pixel_mse": float(np.mean([s.inversion.pixel_mse for s in samples]))}


def cmd_transfer(args, cfg: RunConfig) -> dict:
    _require(cfg, "target")
    if not args.checkpoint:
        raise UsageError("--checkpoint (the source snapshot) is required")
    cfg = _with_seed(cfg, "transfer", args.seed)
    source = _load_checkpoint(args.checkpoint[0])
    ds = _dataset(cfg.data.target, source.config.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    extractor = make_extractor(cfg)
    result = transfer(
        ds.images,
        source,
        cfg.transfer,
        extractor=extractor,
        schedule=cfg.inversion,
        out_dir=out,
        manifest_extra={"run_config": config_mod.to_dict(cfg), "command": "transfer", "dataset_hash": ds.hash},
    )
    h = checkpoint.save(result.snapshot, out / "final.ckpt")
    summary = {"final_checkpoint": str(out / "final.ckpt"), "final_hash": h}
    if result.best is not None:
        summary["best_checkpoint"] = str(out / "best.ckpt")
        summary["best_fid"] = result.best_report.score
        summary["best_step"] = result.best_report.snapshot_step
        checkpoint.save(result.best, out / "best.ckpt")
    records = result.log.of_kind("step")
    if records:
        plotting.plot_losses(records, out / "losses.png", title="transfer")
    fids = result.log.of_kind("fid")
    if fids:
        plotting.plot_fid(fids, out / "fid.png")
    return summary


def cmd_eval(args, cfg: RunConfig) -> dict:
    _require(cfg, "target")
    if not args.checkpoint:
        raise UsageError("at least one --checkpoint is required")
    seed = cfg.metrics.eval_seed if args.seed is None else args.seed
    extractor = make_extractor(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "eval.jsonl")
    reports = []
    for path in args.checkpoint:
        snap = _load_checkpoint(path)
        ds = _dataset(cfg.data.target, snap.config.resolution)
        report = evaluate_fid(snap, ds.images, cfg.metrics.n_fake, extractor, seed)
        rec = {**report.to_record(), "checkpoint": str(path), "checkpoint_hash": parameter_hash(snap)}
        runlog.append(rec)
        reports.append(rec)
    plotting.plot_fid(reports, out / "fid.png")
    _write_manifest(out, cfg, "eval", seed, checkpoints=list(args.checkpoint))
    return {"reports": [{"checkpoint": r["checkpoint"], "score": r["score"]} for r in reports]}


def cmd_sample(args, cfg: RunConfig) -> dict:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    snap = _load_checkpoint(args.checkpoint[0])
    images = generate_images(snap, args.n, args.seed or 0, noise_seed=args.noise_seed)
    save_png(image_grid(images), args.out)
    return {"out": str(args.out), "n": args.n}


def interpolation_frames(snap, seed_a: int, seed_b: int, steps: int, noise_seed: int = 0) -> torch.Tensor:
    """Frames synthesized from styles linearly blended between two seeds' mapped noises."""
    if steps < 2:
        raise UsageError("--steps must be at least 2")
    dim = snap.config.style_dim
    with torch.no_grad():
        w_a = map_noise(sample_noise(1, dim, seed_a), snap)
        w_b = map_noise(sample_noise(1, dim, seed_b), snap)
        t = torch.tensor([k / (steps - 1) for k in range(steps)], dtype=w_a.dtype).view(-1, 1)
        ws = (1 - t) * w_a + t * w_b
        # one frame per call: batched convolutions are not bit-stable across batch sizes
        frames = [synthesize(ws[k : k + 1], snap, seed=[(noise_seed, 0)])[0] for k in range(steps)]
    return torch.cat(frames)


def cmd_interpolate(args, cfg: RunConfig) -> dict:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    snap = _load_checkpoint(args.checkpoint[0])
    frames = interpolation_frames(snap, args.seed_a, args.seed_b, args.steps, args.noise_seed)
    save_png(image_grid(frames, ncol=args.steps), args.out)
    return {"out": str(args.out), "steps": args.steps}


def cmd_dump_features(args, cfg: RunConfig) -> dict:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    snap = _load_checkpoint(args.checkpoint[0])
    folder = args.images or cfg.data.target
    if folder is None:
        raise ConfigError(["data.target: required for this command (or pass --images)"])
    ds = _dataset(folder, snap.config.resolution)
    mat = dump_discriminator_features(snap, ds.images, args.layer, args.out)
    return {"out": str(args.out), "rows": mat.shape[0], "dim": mat.shape[1]}


COMMANDS = {
    "pretrain": cmd_pretrain,
    "invert": cmd_invert,
    "transfer": cmd_transfer,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "make-toys": cmd_make_toys,
    "dump-features": cmd_dump_features,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (or a run manifest)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gantransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    ckpt_kw = dict(action="append", default=[], help="checkpoint file (repeatable for eval)")

    sub.add_parser("pretrain", parents=[common], help="train the source GAN")
    p = sub.add_parser("invert", parents=[common], help="invert target images into the source style space")
    p.add_argument("--checkpoint", **ckpt_kw)
    p = sub.add_parser("transfer", parents=[common], help="few-shot transfer from a source checkpoint")
    p.add_argument("--checkpoint", **ckpt_kw)
    p = sub.add_parser("eval", parents=[common], help="FID of one or more checkpoints against data.target")
    p.add_argument("--checkpoint", **ckpt_kw)
    p = sub.add_parser("sample", parents=[common], help="image grid from seeded noise")
    p.add_argument("--checkpoint", **ckpt_kw)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--noise-seed", type=int, default=0)
    p = sub.add_parser("interpolate", parents=[common], help="style-space interpolation strip")
    p.add_argument("--checkpoint", **ckpt_kw)
    p.add_argument("--seed-a", type=int, required=True)
    p.add_argument("--seed-b", type=int, required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--noise-seed", type=int, default=0)
    p = sub.add_parser("make-toys", parents=[common], help="render the synthetic ellipse/cross domains")
    p.add_argument("--n-source", type=int, default=5000)
    p.add_argument("--n-target", type=int, default=100)
    p = sub.add_parser("dump-features", parents=[common], help="pooled discriminator features as CSV")
    p.add_argument("--checkpoint", **ckpt_kw)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--images", help="image folder (defaults to data.target)")
    return parser


def _error(kind: str, message: str, details=None, code: int = EXIT_RUNTIME) -> int:
    record = {"error": kind, "message": message}
    if details:
        record["details"] = details
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = config_mod.load(args.config, args.set)
        summary = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _error("config", "invalid configuration", exc.problems, EXIT_CONFIG)
    except UsageError as exc:
        return _error("usage", str(exc), code=EXIT_CONFIG)
    except CheckpointError as exc:
        return _error("checkpoint", str(exc))
    except (FileNotFoundError, ValueError, IndexError, RuntimeError) as exc:
        return _error(type(exc).__name__, str(exc))
    print(json.dumps({"command": args.command, **summary}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
