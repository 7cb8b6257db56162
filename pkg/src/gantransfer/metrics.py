"""Frechet distance between Gaussian fits of extracted features, and feature export."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .backbone import GanSnapshot, discriminate, generate, sample_noise, parameter_hash
from .losses import pool

SQRT_RESIDUE_WARN = 1e-3
SINGULAR_EPS = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        if self.count < 2:
            raise ValueError("Gaussian statistics need at least two samples")
        if self.cov.shape != (self.mean.shape[0], self.mean.shape[0]):
            raise ValueError("covariance shape does not match the mean")


@dataclass
class FIDReport:
    score: float
    extractor_id: str
    n_real: int
    n_fake: int
    snapshot_step: int
    note: str = "internal extractor; not comparable to Inception-V3 FID"

    def to_record(self) -> dict:
        return {"kind": "fid", **asdict(self)}


def extract_features(
    images: torch.Tensor | Iterable[torch.Tensor], extractor, batch_size: int = 64
) -> np.ndarray:
    """One pooled feature row per image; accepts a tensor or an iterable of batches."""
    if isinstance(images, torch.Tensor):
        images = [images[i : i + batch_size] for i in range(0, images.shape[0], batch_size)]
    rows = []
    res = None
    dtype = next(extractor.parameters()).dtype
    with torch.no_grad():
        for batch in images:
            if batch.ndim != 4 or batch.shape[1] != 3:
                raise ValueError(f"expected image batches [n, 3, R, R], got {tuple(batch.shape)}")
            if res is None:
                res = batch.shape[-1]
            elif batch.shape[-1] != res:
                raise ValueError("inconsistent image resolution within the stream")
            rows.append(extractor.embed(batch.to(dtype)).to(torch.float64).numpy())
    if not rows:
        raise ValueError("no images to extract features from")
    return np.concatenate(rows)


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a [n >= 2, d] feature matrix")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (x.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mu, cov, x.shape[0])


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues are clamped to zero."""
    a = 0.5 * (a + a.T)
    vals, vecs = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -SQRT_RESIDUE_WARN * scale:
        warnings.warn(f"matrix square root discarded a negative eigenvalue {vals.min():.3g}")
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _is_near_singular(cov: np.ndarray) -> bool:
    vals = np.linalg.eigvalsh(cov)
    return vals.min() <= SINGULAR_EPS * max(1.0, vals.max())


def fid(a: GaussianStats, b: GaussianStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dimensions differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    for s in (a, b):
        if not (np.isfinite(s.mean).all() and np.isfinite(s.cov).all()):
            raise ValueError("non-finite Gaussian statistics")
    sa, sb = a.cov, b.cov
    if _is_near_singular(sa) or _is_near_singular(sb):
        eye = np.eye(sa.shape[0]) * SINGULAR_EPS
        sa, sb = sa + eye, sb + eye
    root_a = sqrtm_psd(sa)
    inner = sqrtm_psd(root_a @ sb @ root_a)
    diff = a.mean - b.mean
    return float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * np.trace(inner))


def dataset_hash(images: torch.Tensor) -> str:
    return hashlib.sha256(images.detach().cpu().to(torch.float32).numpy().tobytes()).hexdigest()


_REAL_STATS: dict[tuple[str, str], GaussianStats] = {}


def real_stats(images: torch.Tensor, extractor) -> GaussianStats:
    """Real-side statistics, memoized per (dataset hash, extractor id)."""
    key = (dataset_hash(images), extractor.extractor_id)
    if key not in _REAL_STATS:
        _REAL_STATS[key] = gaussian_stats(extract_features(images, extractor))
    return _REAL_STATS[key]


def generate_images(
    snapshot: GanSnapshot, n: int, seed: int, noise_seed: int | None = None, batch_size: int = 64
) -> torch.Tensor:
    """``n`` images from seeded noise; sample ``j`` uses noise slot ``(noise_seed, j)``."""
    noise_seed = seed if noise_seed is None else noise_seed
    z = sample_noise(n, snapshot.config.style_dim, seed)
    dtype = next(snapshot.generator.parameters()).dtype
    out = []
    with torch.no_grad():
        for i in range(0, n, batch_size):
            slots = [(noise_seed, j) for j in range(i, min(n, i + batch_size))]
            img, _ = generate(z[i : i + batch_size].to(dtype), snapshot, seed=slots)
            out.append(img)
    return torch.cat(out)


def evaluate_fid(
    snapshot: GanSnapshot, dataset: torch.Tensor, n_fake: int, extractor, seed: int = 0
) -> FIDReport:
    if n_fake < 2:
        raise ValueError("n_fake must be at least 2")
    real = real_stats(dataset, extractor)
    fake = gaussian_stats(extract_features(generate_images(snapshot, n_fake, seed), extractor))
    return FIDReport(
        score=fid(real, fake),
        extractor_id=extractor.extractor_id,
        n_real=real.count,
        n_fake=n_fake,
        snapshot_step=snapshot.step,
    )


def split_half_fid(dataset: torch.Tensor, extractor, seed: int = 0) -> float:
    """FID between two random halves of a real dataset (a floor for that dataset size)."""
    perm = np.random.default_rng(seed).permutation(dataset.shape[0])
    half = len(perm) // 2
    a = gaussian_stats(extract_features(dataset[perm[:half]], extractor))
    b = gaussian_stats(extract_features(dataset[perm[half:]], extractor))
    return fid(a, b)


def dump_discriminator_features(
    snapshot: GanSnapshot, images: torch.Tensor, layer: int, path: str | Path | None = None
) -> np.ndarray:
    """Pooled discriminator features at ``layer`` (1-based), optionally written as CSV.

    The file starts with one ``#``-prefixed metadata line, then a column
    header, then one row per image.
    """
    if not 1 <= layer <= snapshot.config.layer_count_d:
        raise IndexError(f"layer {layer} out of range 1..{snapshot.config.layer_count_d}")
    dtype = next(snapshot.discriminator.parameters()).dtype
    with torch.no_grad():
        _, feats = discriminate(images.to(dtype), snapshot)
    mat = pool(feats, layer).to(torch.float64).numpy()
    if path is not None:
        meta = {
            "layer": layer,
            "n": mat.shape[0],
            "d": mat.shape[1],
            "role": snapshot.role,
            "step": snapshot.step,
            "checkpoint": parameter_hash(snapshot)[:16],
        }
        lines = ["# " + json.dumps(meta, sort_keys=True)]
        lines.append(",".join(f"f{j}" for j in range(mat.shape[1])))
        lines += [",".join(repr(float(v)) for v in row) for row in mat]
        Path(path).write_text("\n".join(lines) + "\n")
    return mat
