"""Embedding target images into the source generator's per-layer style space.

Each image is inverted on its own by optimizing an extended style code
(one style vector per synthesis block) with Adam under a step-decayed
learning rate. The objective is the summed squared pixel error plus a
weighted summed squared error between frozen extractor features.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
from filelock import FileLock

from .backbone import (
    ExtendedStyleCode,
    FeaturePyramid,
    GanSnapshot,
    map_noise,
    parameter_hash,
    sample_noise,
    synthesize,
)

log = logging.getLogger(__name__)

INIT_MODES = ("mapped-noise", "mean-style")
CACHE_ENV = "GANTRANSFER_CACHE"


class InversionDiverged(RuntimeError):
    def __init__(self, message: str, trace: Sequence[float]):
        super().__init__(message)
        self.trace = list(trace)


@dataclass(frozen=True)
class InversionSchedule:
    iterations: int = 2000
    lr_init: float = 0.05
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 500
    lambda1: float = 5e-5

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.lr_decay_every <= 0:
            raise ValueError("lr_decay_every must be positive")
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be non-negative")

    def lr_at(self, iteration: int) -> float:
        return self.lr_init * self.lr_decay_factor ** (iteration // self.lr_decay_every)

    def segment_ends(self) -> list[int]:
        """Index of the last iteration in each constant-learning-rate segment."""
        ends = list(range(self.lr_decay_every - 1, self.iterations, self.lr_decay_every))
        if not ends or ends[-1] != self.iterations - 1:
            ends.append(self.iterations - 1)
        return ends

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# frozen feature extractor


class PerceptualExtractor(nn.Module):
    """Fixed multi-scale convolutional feature maps; never trained.

    ``forward`` returns the list of tapped maps, ``embed`` the globally pooled
    last tap (the vector used for Frechet distances).
    """

    def __init__(self, stages: nn.ModuleList, source: str, extractor_id: str):
        super().__init__()
        self.stages = stages
        self.source = source
        self.extractor_id = extractor_id
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[-1].mean(dim=(2, 3))

    @property
    def feature_dim(self) -> int:
        probe = torch.zeros(1, 3, 16, 16, dtype=next(self.parameters()).dtype)
        with torch.no_grad():
            return self.embed(probe).shape[1]

    def train(self, mode: bool = True):
        # stays in eval mode whatever the caller asks for
        return super().train(False)


def frozen_random_extractor(
    seed: int = 0, widths: Sequence[int] = (32, 64, 128, 256)
) -> PerceptualExtractor:
    """Randomly initialized stride-2 conv stack with one tap per stage."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        stages = []
        in_ch = 3
        for w in widths:
            conv = nn.Conv2d(in_ch, w, 3, stride=2, padding=1)
            nn.init.kaiming_normal_(conv.weight, a=0.2)
            nn.init.zeros_(conv.bias)
            stages.append(nn.Sequential(conv, nn.LeakyReLU(0.2)))
            in_ch = w
    ident = f"frozen-random-conv{len(widths)}-w{'-'.join(map(str, widths))}-seed{seed}"
    return PerceptualExtractor(nn.ModuleList(stages), "frozen-random", ident)


def vgg16_extractor() -> PerceptualExtractor:
    """ImageNet VGG-16 taps (relu1_2, relu2_2, relu3_3, relu4_3); needs the torchvision weights."""
    from torchvision.models import VGG16_Weights, vgg16

    features = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features
    cuts = [(0, 4), (4, 9), (9, 16), (16, 23)]
    mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
    std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

    class _Normalize(nn.Module):
        def forward(self, x):
            return ((x + 1) / 2 - mean.to(x)) / std.to(x)

    stages = [nn.Sequential(_Normalize(), *features[cuts[0][0]:cuts[0][1]])]
    stages += [nn.Sequential(*features[a:b]) for a, b in cuts[1:]]
    return PerceptualExtractor(nn.ModuleList(stages), "pretrained-classifier", "vgg16-imagenet")


# ---------------------------------------------------------------------------
# objective and optimization


@dataclass
class InversionResult:
    code: ExtendedStyleCode
    reconstruction: torch.Tensor
    final_pixel_loss: float
    final_perceptual_loss: float
    loss_trace: np.ndarray
    lr_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0

    @property
    def final_loss(self) -> float:
        return self.final_pixel_loss + self.final_perceptual_loss

    @property
    def pixel_mse(self) -> float:
        return self.final_pixel_loss / self.reconstruction.numel()


@dataclass
class TransformedSample:
    target_image: torch.Tensor
    inversion: InversionResult
    source_features: FeaturePyramid
    item_hash: str = ""


def _render(source, code, seed):
    if isinstance(source, GanSnapshot):
        img, _ = synthesize(code, source, seed)
        return img
    return source(code)


def objective_terms(code, target, source, extractor, lambda1, seed=0):
    """Return (pixel term, weighted perceptual term) as tensors."""
    x_hat = _render(source, code, seed)
    if x_hat.shape != target.shape:
        raise ValueError(f"reconstruction {tuple(x_hat.shape)} vs target {tuple(target.shape)}")
    pixel = (x_hat - target).pow(2).sum()
    if lambda1 == 0 or extractor is None:
        return pixel, pixel.new_zeros(()), x_hat
    feats_hat = extractor(x_hat)
    with torch.no_grad():
        feats = extractor(target)
    perceptual = sum((a - b).pow(2).sum() for a, b in zip(feats_hat, feats))
    return pixel, lambda1 * perceptual, x_hat


def inversion_objective(
    code,
    target: torch.Tensor,
    source: GanSnapshot | Callable[[torch.Tensor], torch.Tensor],
    extractor: PerceptualExtractor | None,
    lambda1: float,
    seed: int = 0,
) -> torch.Tensor:
    """||G(code) - x||^2 + lambda1 * ||C(G(code)) - C(x)||^2 for a single target image."""
    if target.shape[0] != 1:
        raise ValueError("inversion works on one image at a time")
    pixel, perceptual, _ = objective_terms(code, target, source, extractor, lambda1, seed)
    return pixel + perceptual


def initial_code(source: GanSnapshot, init: str, seed: int) -> torch.Tensor:
    """Starting extended code [1, layers, dim]: one style broadcast to every layer."""
    cfg = source.config
    dtype = next(source.generator.parameters()).dtype
    with torch.no_grad():
        if init == "mapped-noise":
            w = map_noise(sample_noise(1, cfg.style_dim, seed).to(dtype), source)
        elif init == "mean-style":
            w = map_noise(sample_noise(10_000, cfg.style_dim, seed).to(dtype), source).mean(0, keepdim=True)
        else:
            raise ValueError(f"init must be one of {INIT_MODES}")
    return w.unsqueeze(1).repeat(1, cfg.layer_count_g, 1)


class _frozen:
    """Temporarily switch off requires_grad on a snapshot's parameters."""

    def __init__(self, snapshot: GanSnapshot):
        self.params = list(snapshot.generator.parameters()) + list(snapshot.discriminator.parameters())

    def __enter__(self):
        self.flags = [p.requires_grad for p in self.params]
        for p in self.params:
            p.requires_grad_(False)

    def __exit__(self, *exc):
        for p, flag in zip(self.params, self.flags):
            p.requires_grad_(flag)


def invert(
    target: torch.Tensor,
    source: GanSnapshot,
    extractor: PerceptualExtractor | None,
    schedule: InversionSchedule = InversionSchedule(),
    init: str | torch.Tensor = "mapped-noise",
    seed: int = 0,
) -> InversionResult:
    """Optimize an extended style code so that the source generator reproduces ``target``.

    ``init`` is an init mode name or an explicit starting code. The returned
    code is the last iterate unless an earlier one scored lower, so the
    final objective never exceeds the initial one.
    """
    if target.ndim != 4 or target.shape[0] != 1:
        raise ValueError("invert expects a single image [1, 3, R, R]")
    r = source.config.resolution
    if target.shape[-1] != r or target.shape[-2] != r:
        raise ValueError(f"target resolution {tuple(target.shape[-2:])} does not match source {r}")

    before = parameter_hash(source)
    if isinstance(init, torch.Tensor):
        start = init.detach().clone().reshape(1, source.config.layer_count_g, source.config.style_dim)
    else:
        start = initial_code(source, init, seed)
    code = start.clone().requires_grad_(True)
    opt = torch.optim.Adam([code], lr=schedule.lr_init)
    target = target.detach()

    trace = np.zeros(schedule.iterations)
    lrs = np.zeros(schedule.iterations)
    best = (float("inf"), None)
    with _frozen(source):
        for it in range(schedule.iterations):
            lr = schedule.lr_at(it)
            for group in opt.param_groups:
                group["lr"] = lr
            lrs[it] = lr
            pixel, perceptual, _ = objective_terms(code, target, source, extractor, schedule.lambda1, seed)
            loss = pixel + perceptual
            value = loss.item()
            trace[it] = value
            if not np.isfinite(value):
                raise InversionDiverged(f"non-finite inversion loss at iteration {it}", trace[: it + 1])
            if value < best[0]:
                best = (value, code.detach().clone())
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

        with torch.no_grad():
            pixel, perceptual, x_hat = objective_terms(code, target, source, extractor, schedule.lambda1, seed)
            if (pixel + perceptual).item() > best[0]:
                final = best[1]
                pixel, perceptual, x_hat = objective_terms(
                    final, target, source, extractor, schedule.lambda1, seed
                )
            else:
                final = code.detach().clone()

    if parameter_hash(source) != before:
        raise RuntimeError("source snapshot changed during inversion")
    return InversionResult(
        code=ExtendedStyleCode(final[0]),
        reconstruction=x_hat.detach(),
        final_pixel_loss=float(pixel),
        final_perceptual_loss=float(perceptual),
        loss_trace=trace,
        lr_trace=lrs,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# transform cache


def item_hash(image: torch.Tensor) -> str:
    return hashlib.sha256(image.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()).hexdigest()


def _item_seed(base_seed: int, ihash: str) -> int:
    return (int(ihash[:8], 16) ^ int(base_seed)) & 0x7FFFFFFF


def default_cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "gantransfer"))


def _cache_key(source_hash, schedule, extractor, init, seed) -> dict:
    return {
        "source_hash": source_hash,
        "schedule": asdict(schedule),
        "extractor_id": getattr(extractor, "extractor_id", "none"),
        "init": init,
        "seed": int(seed),
    }


def cache_dir_for(root: Path, key: dict) -> Path:
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()
    return Path(root) / "transforms" / f"{key['source_hash'][:12]}-{digest[:12]}"


def _source_features(source: GanSnapshot, code: torch.Tensor, seed: int) -> FeaturePyramid:
    with torch.no_grad():
        _, feats = synthesize(code, source, seed)
    return feats.detach()


def _save_record(path: Path, res: InversionResult):
    np.savez(
        path,
        code=res.code.per_layer.cpu().to(torch.float32).numpy(),
        reconstruction=res.reconstruction.cpu().to(torch.float32).numpy(),
        final_pixel_loss=res.final_pixel_loss,
        final_perceptual_loss=res.final_perceptual_loss,
        loss_trace=res.loss_trace,
        lr_trace=res.lr_trace,
        seed=res.seed,
    )


def _load_record(path: Path, dtype) -> InversionResult:
    with np.load(path) as z:
        return InversionResult(
            code=ExtendedStyleCode(torch.from_numpy(z["code"]).to(dtype)),
            reconstruction=torch.from_numpy(z["reconstruction"]).to(dtype),
            final_pixel_loss=float(z["final_pixel_loss"]),
            final_perceptual_loss=float(z["final_perceptual_loss"]),
            loss_trace=z["loss_trace"],
            lr_trace=z["lr_trace"],
            seed=int(z["seed"]),
        )


def precompute_transforms(
    dataset: Sequence[torch.Tensor] | torch.Tensor,
    source: GanSnapshot,
    extractor: PerceptualExtractor | None,
    schedule: InversionSchedule = InversionSchedule(),
    init: str = "mapped-noise",
    seed: int = 0,
    cache_root: str | Path | None = None,
    use_cache: bool = True,
) -> list[TransformedSample]:
    """Invert every image of ``dataset`` (order preserved), reusing cached inversions."""
    images = [img.reshape(1, *img.shape[-3:]) for img in dataset]
    if not images:
        raise ValueError("dataset is empty")
    dtype = next(source.generator.parameters()).dtype
    src_hash = parameter_hash(source)
    key = _cache_key(src_hash, schedule, extractor, init, seed)

    cdir = None
    index: dict[str, str] = {}
    if use_cache:
        cdir = cache_dir_for(Path(cache_root) if cache_root else default_cache_root(), key)
        cdir.mkdir(parents=True, exist_ok=True)
        manifest = cdir / "manifest.json"
        if manifest.exists():
            stored = json.loads(manifest.read_text())
            if stored != json.loads(json.dumps(key)):
                log.warning("transform cache %s was written for another source/config; recomputing", cdir)
                shutil.rmtree(cdir)
                cdir.mkdir(parents=True)
        if not manifest.exists():
            manifest.write_text(json.dumps(key, indent=2, sort_keys=True))
        index_path = cdir / "index.json"
        if index_path.exists():
            index = {r["item_hash"]: r["file"] for r in json.loads(index_path.read_text())["records"]}

    out = []
    computed = 0
    for i, img in enumerate(images):
        ihash = item_hash(img)
        iseed = _item_seed(seed, ihash)
        res = None
        if cdir is not None and ihash in index and (cdir / index[ihash]).exists():
            res = _load_record(cdir / index[ihash], dtype)
        if res is None:
            res = invert(img.to(dtype), source, extractor, schedule, init=init, seed=iseed)
            computed += 1
            if cdir is not None:
                fname = f"{ihash[:24]}.npz"
                _save_record(cdir / fname, res)
                with FileLock(str(cdir / "index.lock")):
                    index_path = cdir / "index.json"
                    records = json.loads(index_path.read_text())["records"] if index_path.exists() else []
                    records = [r for r in records if r["item_hash"] != ihash]
                    records.append({"item_hash": ihash, "file": fname})
                    tmp = index_path.with_suffix(".tmp")
                    tmp.write_text(json.dumps({"records": records}, indent=1))
                    os.replace(tmp, index_path)
                index[ihash] = fname
        feats = _source_features(source, res.code.as_batch(), iseed)
        out.append(TransformedSample(img, res, feats, ihash))
        log.debug("transform %d/%d ready (pixel mse %.4g)", i + 1, len(images), res.pixel_mse)
    log.info("transforms: %d computed, %d from cache", computed, len(images) - computed)
    return out
