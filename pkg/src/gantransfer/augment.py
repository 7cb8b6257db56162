"""Differentiable augmentation shared by real and generated batches.

All random draws come from a generator seeded with ``step_seed`` and are made
per sample slot, so two calls with the same seed and batch size transform slot
``i`` identically.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

OPS = ("color", "translation", "cutout")


@dataclass(frozen=True)
class AugmentPolicy:
    ops: tuple[str, ...] = ()
    brightness: float = 0.5
    saturation: tuple[float, float] = (0.0, 2.0)
    contrast: tuple[float, float] = (0.5, 1.5)
    translation_ratio: float = 0.125
    cutout_ratio: float = 0.5

    def __post_init__(self):
        ops = tuple(self.ops)
        bad = [op for op in ops if op not in OPS]
        if bad:
            raise ValueError(f"unknown augmentation ops {bad}; choose from {OPS}")
        object.__setattr__(self, "ops", ops)

    @classmethod
    def parse(cls, text: str) -> AugmentPolicy:
        """Parse a policy string such as ``"color,translation,cutout"``."""
        ops = tuple(p.strip() for p in text.split(",") if p.strip())
        return cls(ops=ops)

    def __str__(self) -> str:
        return ",".join(self.ops)

    @property
    def enabled(self) -> bool:
        return bool(self.ops)


def _uniform(g: torch.Generator, n: int, lo: float, hi: float, like: torch.Tensor) -> torch.Tensor:
    r = torch.rand(n, generator=g, dtype=torch.float64)
    return (lo + (hi - lo) * r).to(like.dtype).view(n, 1, 1, 1)


def adjust_color(x, brightness, saturation, contrast):
    """Per-sample brightness shift, saturation and contrast scale, then clamp to [-1, 1]."""
    x = x + brightness
    mean_c = x.mean(dim=1, keepdim=True)
    x = (x - mean_c) * saturation + mean_c
    mean_all = x.mean(dim=(1, 2, 3), keepdim=True)
    x = (x - mean_all) * contrast + mean_all
    return x.clamp(-1.0, 1.0)


def translate(x: torch.Tensor, dx: torch.Tensor, dy: torch.Tensor) -> torch.Tensor:
    """Shift sample ``b`` by ``dx[b]`` columns and ``dy[b]`` rows, zero-filling vacated pixels."""
    B, C, H, W = x.shape
    rows = torch.arange(H)[None, :, None] - dy.view(B, 1, 1)
    cols = torch.arange(W)[None, None, :] - dx.view(B, 1, 1)
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    b = torch.arange(B)[:, None, None]
    out = x.permute(0, 2, 3, 1)[b, rows.clamp(0, H - 1), cols.clamp(0, W - 1)]
    return out.permute(0, 3, 1, 2) * valid.unsqueeze(1).to(x.dtype)


def cutout(x: torch.Tensor, top: torch.Tensor, left: torch.Tensor, size: int) -> torch.Tensor:
    B, _, H, W = x.shape
    rows = torch.arange(H)[None, :, None]
    cols = torch.arange(W)[None, None, :]
    t = top.view(B, 1, 1)
    l = left.view(B, 1, 1)
    inside = (rows >= t) & (rows < t + size) & (cols >= l) & (cols < l + size)
    return x * (~inside).unsqueeze(1).to(x.dtype)


def diff_augment(x: torch.Tensor, policy: AugmentPolicy, step_seed: int) -> torch.Tensor:
    if not policy.ops:
        return x
    g = torch.Generator().manual_seed(int(step_seed))
    B, _, H, W = x.shape
    for op in policy.ops:
        if op == "color":
            b = _uniform(g, B, -policy.brightness, policy.brightness, x)
            s = _uniform(g, B, *policy.saturation, x)
            c = _uniform(g, B, *policy.contrast, x)
            x = adjust_color(x, b, s, c)
        elif op == "translation":
            sh = int(H * policy.translation_ratio + 0.5)
            sw = int(W * policy.translation_ratio + 0.5)
            dy = torch.randint(-sh, sh + 1, (B,), generator=g)
            dx = torch.randint(-sw, sw + 1, (B,), generator=g)
            x = translate(x, dx, dy)
        elif op == "cutout":
            size = int(H * policy.cutout_ratio + 0.5)
            top = torch.randint(0, H - size + 1, (B,), generator=g)
            left = torch.randint(0, W - size + 1, (B,), generator=g)
            x = cutout(x, top, left, size)
    return x
