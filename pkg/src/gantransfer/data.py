"""Image folders in, image grids out, plus the procedural toy domains."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


@dataclass
class ImageDataset:
    images: torch.Tensor  # [N, 3, R, R] in [-1, 1]
    names: list[str]
    item_hashes: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    @property
    def hash(self) -> str:
        return hashlib.sha256("".join(self.item_hashes).encode()).hexdigest()


def _to_tensor(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1)


def load_image(path: Path, resolution: int) -> np.ndarray:
    """Decode, center-crop to a square and resize; returns uint8 [R, R, 3]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = min(w, h)
        left, top = (w - s) // 2, (h - s) // 2
        im = im.crop((left, top, left + s, top + s))
        if s != resolution:
            im = im.resize((resolution, resolution), Image.LANCZOS)
        return np.asarray(im, dtype=np.uint8)


def ingest_dataset(path: str | Path, resolution: int) -> ImageDataset:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    files = sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    arrays, names, hashes = [], [], []
    for f in files:
        try:
            arr = load_image(f, resolution)
        except Exception as exc:  # PIL raises a zoo of exception types
            log.warning("skipping unreadable image %s: %s", f, exc)
            continue
        arrays.append(arr)
        names.append(f.name)
        hashes.append(hashlib.sha256(arr.tobytes()).hexdigest())
    if not arrays:
        raise ValueError(f"no readable images in {root}")
    images = torch.stack([_to_tensor(a) for a in arrays])
    return ImageDataset(images, names, hashes)


# ---------------------------------------------------------------------------
# toy domains

SUPERSAMPLE = 4


def _grid(res: int) -> tuple[np.ndarray, np.ndarray]:
    n = res * SUPERSAMPLE
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c)  # x (columns), y (rows) in [0, 1]


def _compose(mask: np.ndarray, fg: np.ndarray, bg: np.ndarray, res: int) -> np.ndarray:
    img = mask[..., None] * fg + (1 - mask[..., None]) * bg
    img = img.reshape(res, SUPERSAMPLE, res, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def render_ellipse(rng: np.random.Generator, res: int) -> np.ndarray:
    x, y = _grid(res)
    cx, cy = rng.uniform(0.3, 0.7, 2)
    a, b = rng.uniform(0.12, 0.35, 2)
    th = rng.uniform(0, np.pi)
    dx, dy = x - cx, y - cy
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    mask = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
    fg = rng.uniform(0.3, 1.0, 3)
    bg = np.full(3, rng.uniform(0.0, 0.25))
    return _compose(mask, fg, bg, res)


def render_cross(rng: np.random.Generator, res: int) -> np.ndarray:
    x, y = _grid(res)
    cx, cy = rng.uniform(0.35, 0.65, 2)
    arm = rng.uniform(0.2, 0.38)
    half = rng.uniform(0.05, 0.11)
    th = rng.uniform(0, np.pi / 2)
    dx, dy = x - cx, y - cy
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    bar1 = (np.abs(u) <= arm) & (np.abs(v) <= half)
    bar2 = (np.abs(v) <= arm) & (np.abs(u) <= half)
    mask = (bar1 | bar2).astype(np.float64)
    fg = rng.uniform(0.3, 1.0, 3)
    bg = np.full(3, rng.uniform(0.0, 0.25))
    return _compose(mask, fg, bg, res)


def make_toy_domains(
    counts: tuple[int, int], seed: int, out_path: str | Path, resolution: int = 32
) -> tuple[ImageDataset, ImageDataset]:
    """Render ``counts = (n_source, n_target)`` ellipse and cross images as PNG folders."""
    n_src, n_tgt = counts
    if n_src < 1 or n_tgt < 1:
        raise ValueError("both toy domains need at least one image")
    out = Path(out_path)
    rng_src, rng_tgt = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    for sub, n, rng, render in (
        ("source", n_src, rng_src, render_ellipse),
        ("target", n_tgt, rng_tgt, render_cross),
    ):
        d = out / sub
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.fromarray(render(rng, resolution)).save(d / f"{i:05d}.png")
    return ingest_dataset(out / "source", resolution), ingest_dataset(out / "target", resolution)


# ---------------------------------------------------------------------------
# image output


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """[N, 3, R, R] in [-1, 1] -> uint8 [N, R, R, 3]."""
    x = ((images.detach().to(torch.float32).clamp(-1, 1) + 1) * 127.5).round()
    return x.to(torch.uint8).permute(0, 2, 3, 1).numpy()


def image_grid(images: torch.Tensor, ncol: int | None = None, pad: int = 1) -> np.ndarray:
    n = images.shape[0]
    if n < 1:
        raise ValueError("no images for the grid")
    ncol = ncol or math.ceil(math.sqrt(n))
    nrow = math.ceil(n / ncol)
    tiles = to_uint8(images)
    r = tiles.shape[1]
    grid = np.zeros((nrow * (r + pad) + pad, ncol * (r + pad) + pad, 3), dtype=np.uint8)
    for k, tile in enumerate(tiles):
        i, j = divmod(k, ncol)
        y, x = pad + i * (r + pad), pad + j * (r + pad)
        grid[y : y + r, x : x + r] = tile
    return grid


def save_png(array: np.ndarray, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")
