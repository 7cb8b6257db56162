"""Source pretraining and the two-network distillation transfer loop.

Each iteration runs one discriminator step followed by one generator step.
The source pair stays frozen for the whole run; the target pair starts as an
exact copy of it. R1 is applied lazily as its own discriminator update so the
logged totals are exactly the adversarial-plus-distillation objectives.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from . import checkpoint
from .augment import AugmentPolicy, diff_augment
from .backbone import (
    FeaturePyramid,
    GanSnapshot,
    NetworkConfig,
    discriminate,
    generate,
    init_target_from_source,
    new_snapshot,
    parameter_hash,
)
from .inversion import InversionSchedule, PerceptualExtractor, TransformedSample, precompute_transforms
from .losses import (
    LayerMask,
    LossWeights,
    MMDConfig,
    adversarial_d,
    adversarial_g,
    discriminator_distillation,
    generator_distillation,
    generator_regularization,
    r1_penalty,
    total_d,
    total_g,
)
from .metrics import FIDReport, evaluate_fid

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: GanSnapshot | None = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TransferConfig:
    weights: LossWeights = LossWeights()
    mmd: MMDConfig = MMDConfig()
    # None selects the lower layers of the network (layers 1-4 of 7)
    mask: LayerMask | None = None
    batch_size: int = 16
    lr_g: float = 0.001
    lr_d: float = 0.002
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    total_steps: int = 1000
    augment: AugmentPolicy = AugmentPolicy()
    r1_gamma: float = 1.0
    r1_every: int = 16
    seed: int = 0
    snapshot_every: int = 100
    eval_n_fake: int = 0
    freeze_d_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.r1_every < 1 or self.snapshot_every < 1:
            raise ValueError("r1_every and snapshot_every must be >= 1")
        if self.r1_gamma < 0:
            raise ValueError("r1_gamma must be non-negative")

    def resolved_mask(self, net: NetworkConfig) -> LayerMask:
        mask = self.mask or LayerMask.lower(net.layer_count_g)
        mask.validate(net.layer_count_g, net.layer_count_d)
        return mask


@dataclass
class StepRecord:
    step: int
    loss_g_total: float = 0.0
    loss_g_adv: float = 0.0
    loss_g_dis: float = 0.0
    loss_g_reg: float = 0.0
    loss_d_total: float = 0.0
    loss_d_adv: float = 0.0
    loss_d_dis: float = 0.0
    loss_r1: float = 0.0

    def to_record(self) -> dict:
        return {"kind": "step", **asdict(self)}


class RunLog:
    """Newline-delimited JSON records, optionally mirrored to a file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict):
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") == kind]

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class CachedTransforms:
    """Transformed samples with their source pyramids stacked for minibatch indexing."""

    features: FeaturePyramid
    samples: list[TransformedSample]

    @classmethod
    def from_samples(cls, samples: Sequence[TransformedSample]) -> CachedTransforms:
        if not samples:
            raise ValueError("transform cache is empty")
        return cls(FeaturePyramid.cat([s.source_features for s in samples]).detach(), list(samples))

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class TrainState:
    target: GanSnapshot
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    rng: torch.Generator
    cfg: TransferConfig
    source: GanSnapshot | None = None
    cache: CachedTransforms | None = None
    mask: LayerMask | None = None
    step: int = 0


def _set_requires_grad(module: torch.nn.Module, flag: bool, skip: set[int] = frozenset()):
    for p in module.parameters():
        if id(p) not in skip:
            p.requires_grad_(flag)


def _frozen_d_params(snapshot: GanSnapshot, layers: Sequence[int]) -> list[torch.nn.Parameter]:
    d = snapshot.discriminator
    params: list[torch.nn.Parameter] = []
    for i in layers:
        if not 1 <= i <= len(d.blocks):
            raise ValueError(f"cannot freeze discriminator layer {i}")
        params += list(d.blocks[i - 1].parameters())
        if i == 1:
            params += list(d.from_rgb.parameters())
    return params


def make_state(
    target: GanSnapshot,
    cfg: TransferConfig,
    source: GanSnapshot | None = None,
    cache: CachedTransforms | None = None,
) -> TrainState:
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    frozen = {id(p) for p in _frozen_d_params(target, cfg.freeze_d_layers)}
    for p in target.discriminator.parameters():
        p.requires_grad_(id(p) not in frozen)
    d_params = [p for p in target.discriminator.parameters() if id(p) not in frozen]
    opt_g = torch.optim.Adam(target.generator.parameters(), lr=cfg.lr_g, betas=betas)
    opt_d = torch.optim.Adam(d_params, lr=cfg.lr_d, betas=betas)
    mask = cfg.resolved_mask(target.config) if source is not None else None
    if source is not None:
        source.freeze()
    return TrainState(
        target=target,
        opt_g=opt_g,
        opt_d=opt_d,
        rng=torch.Generator().manual_seed(cfg.seed),
        cfg=cfg,
        source=source,
        cache=cache,
        mask=mask,
        step=target.step,
    )


def _step_seed(state: TrainState, phase: int) -> int:
    return (state.cfg.seed * 1_000_003 + state.step * 4 + phase) & 0x7FFFFFFF


def _noise(state: TrainState, n: int) -> torch.Tensor:
    dtype = next(state.target.generator.parameters()).dtype
    return torch.randn(n, state.target.config.style_dim, generator=state.rng).to(dtype)


def sample_real_batch(images: torch.Tensor, batch_size: int, rng: torch.Generator) -> torch.Tensor:
    """Uniform minibatch without replacement, or with replacement when the set is smaller."""
    n = images.shape[0]
    if n >= batch_size:
        idx = torch.randperm(n, generator=rng)[:batch_size]
    else:
        idx = torch.randint(0, n, (batch_size,), generator=rng)
    return images[idx]


def _check_finite(values: dict, state: TrainState):
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite {', '.join(bad)} at step {state.step}")


def transfer_step_d(state: TrainState, batch_real: torch.Tensor, cfg: TransferConfig | None = None) -> dict:
    """One target-discriminator update; source-side distillation when a source is attached."""
    cfg = cfg or state.cfg
    B = batch_real.shape[0]
    z = _noise(state, B)
    with torch.no_grad():
        x_fake, _ = generate(z, state.target, seed=_step_seed(state, 0))
    aug_seed = _step_seed(state, 1)
    xr = diff_augment(batch_real, cfg.augment, aug_seed)
    xf = diff_augment(x_fake, cfg.augment, aug_seed)

    scores, feats_t = discriminate(torch.cat([xr, xf]), state.target)
    adv = adversarial_d(scores[B:], scores[:B])
    if state.source is not None:
        with torch.no_grad():
            _, feats_s = discriminate(torch.cat([xr, xf]), state.source)
        real_idx, fake_idx = slice(0, B), slice(B, 2 * B)
        dis = discriminator_distillation(
            feats_s.select(real_idx),
            feats_t.select(real_idx),
            feats_s.select(fake_idx),
            feats_t.select(fake_idx),
            state.mask,
            cfg.mmd,
        )
    else:
        dis = adv.new_zeros(())
    loss = total_d(adv, dis, 0.0, cfg.weights)
    if cfg.weights.lambda4 == 0:
        loss = adv
    state.opt_d.zero_grad(set_to_none=True)
    loss.backward()
    state.opt_d.step()

    r1 = 0.0
    if cfg.r1_gamma > 0 and state.step % cfg.r1_every == 0:
        penalty = r1_penalty(xr.detach(), state.target)
        state.opt_d.zero_grad(set_to_none=True)
        (cfg.r1_gamma * cfg.r1_every * penalty).backward()
        state.opt_d.step()
        r1 = penalty.item()

    a, d = adv.item(), dis.item()
    out = {
        "loss_d_adv": a,
        "loss_d_dis": d,
        "loss_d_total": total_d(a, d, 0.0, cfg.weights),
        "loss_r1": r1,
    }
    _check_finite(out, state)
    return out


def transfer_step_g(state: TrainState, batch_real: torch.Tensor, cfg: TransferConfig | None = None) -> dict:
    """One target-generator update (mapping network included)."""
    cfg = cfg or state.cfg
    D = state.target.discriminator
    B = batch_real.shape[0]
    trainable = [p.requires_grad for p in D.parameters()]
    for p in D.parameters():
        p.requires_grad_(False)
    try:
        z = _noise(state, B)
        x_fake, F_t = generate(z, state.target, seed=_step_seed(state, 2))
        aug_seed = _step_seed(state, 3)
        xf = diff_augment(x_fake, cfg.augment, aug_seed)
        scores, _ = discriminate(xf, state.target)
        adv = adversarial_g(scores)

        dis = reg = adv.new_zeros(())
        if state.source is not None:
            w = cfg.weights
            if state.cache is not None:
                n = len(state.cache)
                if n >= B:
                    idx = torch.randperm(n, generator=state.rng)[:B]
                else:
                    idx = torch.randint(0, n, (B,), generator=state.rng)
                F_s = state.cache.features.select(idx)
                with torch.set_grad_enabled(w.lambda2 > 0):
                    dis = generator_distillation(F_s, F_t, state.mask, cfg.mmd)
            xr = diff_augment(batch_real, cfg.augment, aug_seed)
            with torch.no_grad():
                _, E_real = discriminate(xr, state.source)
            with torch.set_grad_enabled(w.lambda3 > 0):
                _, E_fake = discriminate(xf if w.lambda3 > 0 else xf.detach(), state.source)
                reg = generator_regularization(E_real, E_fake, state.mask, cfg.mmd)
        loss = adv
        if cfg.weights.lambda2 > 0:
            loss = loss + cfg.weights.lambda2 * dis
        if cfg.weights.lambda3 > 0:
            loss = loss + cfg.weights.lambda3 * reg
        state.opt_g.zero_grad(set_to_none=True)
        loss.backward()
        state.opt_g.step()
    finally:
        for p, flag in zip(D.parameters(), trainable):
            p.requires_grad_(flag)

    a, d, r = adv.item(), float(dis.detach()), float(reg.detach())
    out = {
        "loss_g_adv": a,
        "loss_g_dis": d,
        "loss_g_reg": r,
        "loss_g_total": total_g(a, d, r, cfg.weights),
    }
    _check_finite(out, state)
    return out


def train_iteration(state: TrainState, real_images: torch.Tensor) -> StepRecord:
    cfg = state.cfg
    batch_d = sample_real_batch(real_images, cfg.batch_size, state.rng)
    rec_d = transfer_step_d(state, batch_d)
    batch_g = sample_real_batch(real_images, cfg.batch_size, state.rng)
    rec_g = transfer_step_g(state, batch_g)
    state.step += 1
    state.target.step = state.step
    return StepRecord(step=state.step, **rec_d, **rec_g)


@dataclass
class RunResult:
    snapshot: GanSnapshot
    log: RunLog
    reports: list[FIDReport] = field(default_factory=list)
    best: GanSnapshot | None = None
    best_report: FIDReport | None = None
    snapshot_steps: list[int] = field(default_factory=list)

    @property
    def records(self) -> list[StepRecord]:
        keys = StepRecord.__dataclass_fields__
        return [StepRecord(**{k: r[k] for k in keys}) for r in self.log.of_kind("step")]


def _run(
    state: TrainState,
    real_images: torch.Tensor,
    out_dir: Path | None,
    runlog: RunLog,
    extractor: PerceptualExtractor | None,
    eval_seed: int,
) -> RunResult:
    cfg = state.cfg
    result = RunResult(snapshot=state.target, log=runlog)
    last_good = copy.deepcopy(state.target)
    for _ in range(cfg.total_steps):
        try:
            rec = train_iteration(state, real_images)
        except TrainingDiverged as exc:
            exc.last_good = last_good
            runlog.append({"kind": "error", "step": state.step, "message": str(exc)})
            raise
        runlog.append(rec.to_record())
        if state.step % cfg.snapshot_every == 0 or state.step == cfg.total_steps:
            last_good = copy.deepcopy(state.target)
            result.snapshot_steps.append(state.step)
            entry = {"kind": "snapshot", "step": state.step, "hash": parameter_hash(state.target)}
            if out_dir is not None:
                path = out_dir / f"snapshot-{state.step:06d}.ckpt"
                checkpoint.save(state.target, path)
                entry["path"] = path.name
            runlog.append(entry)
            if extractor is not None and cfg.eval_n_fake >= 2:
                report = evaluate_fid(state.target, real_images, cfg.eval_n_fake, extractor, eval_seed)
                result.reports.append(report)
                runlog.append(report.to_record())
                if result.best_report is None or report.score < result.best_report.score:
                    result.best_report = report
                    result.best = copy.deepcopy(state.target)
        if state.step % 50 == 0:
            log.info("step %d: %s", state.step, {k: round(v, 4) for k, v in asdict(rec).items()})
    return result


def pretrain(
    source_dataset: torch.Tensor,
    net: NetworkConfig,
    cfg: TransferConfig,
    out_dir: str | Path | None = None,
    extractor: PerceptualExtractor | None = None,
    init_seed: int | None = None,
) -> RunResult:
    """Adversarial training from random initialization; returns a source-role snapshot."""
    if source_dataset.shape[0] == 0:
        raise ValueError("source dataset is empty")
    if source_dataset.shape[-1] != net.resolution:
        raise ValueError(f"dataset resolution {source_dataset.shape[-1]} != network resolution {net.resolution}")
    snapshot = new_snapshot(net, seed=cfg.seed if init_seed is None else init_seed, role="source")
    state = make_state(snapshot, cfg)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "runlog.jsonl" if out else None)
    result = _run(state, source_dataset, out, runlog, extractor, cfg.seed)
    _set_requires_grad(result.snapshot.generator, False)
    _set_requires_grad(result.snapshot.discriminator, False)
    return result


def transfer(
    target_dataset: torch.Tensor,
    source: GanSnapshot,
    cfg: TransferConfig,
    transforms: Sequence[TransformedSample] | None = None,
    extractor: PerceptualExtractor | None = None,
    schedule: InversionSchedule = InversionSchedule(),
    out_dir: str | Path | None = None,
    cache_root: str | Path | None = None,
    manifest_extra: dict | None = None,
) -> RunResult:
    """Fine-tune a copy of ``source`` on ``target_dataset`` under the distillation losses."""
    if source.role != "source":
        raise ValueError("transfer needs a source-role snapshot")
    if target_dataset.shape[-1] != source.config.resolution:
        raise ValueError(
            f"dataset resolution {target_dataset.shape[-1]} != source resolution {source.config.resolution}"
        )
    source_hash = parameter_hash(source)
    if transforms is None:
        transforms = precompute_transforms(
            list(target_dataset), source, extractor, schedule, seed=cfg.seed, cache_root=cache_root
        )
    target = init_target_from_source(source)
    state = make_state(target, cfg, source=source, cache=CachedTransforms.from_samples(transforms))

    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    runlog = RunLog(out / "runlog.jsonl" if out else None)
    result = _run(state, target_dataset, out, runlog, extractor, cfg.seed)
    result.snapshot.role = "target"

    if parameter_hash(source) != source_hash:
        raise RuntimeError("source snapshot changed during transfer")
    if out:
        manifest = {
            "config": config_to_dict(cfg),
            "seed": cfg.seed,
            "source_hash": source_hash,
            "final_hash": parameter_hash(result.snapshot),
            "snapshot_steps": result.snapshot_steps,
            "best_fid": None if result.best_report is None else asdict(result.best_report),
        }
        manifest.update(manifest_extra or {})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return result


def config_to_dict(cfg: TransferConfig) -> dict:
    d = asdict(cfg)
    d["augment"] = asdict(cfg.augment)
    return json.loads(json.dumps(d))
