"""Desk-scale style-modulated generator/discriminator pair with per-layer feature taps.

Synthesis starts from a learned 4x4 constant and doubles the resolution once per
block. Every block consumes one style vector through adaptive instance
normalization, so a generator at resolution ``R`` has ``log2(R) - 1`` blocks,
``log2(R) - 1`` style inputs and the same number of feature taps. The
discriminator mirrors it with one block per octave going down to 4x4.
"""
from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NOISE_MODES = ("deterministic-from-seed", "off")
ROLES = ("source", "target")


@dataclass(frozen=True)
class NetworkConfig:
    resolution: int = 64
    style_dim: int = 512
    mapping_depth: int = 4
    channel_base: int = 64
    channel_max: int = 256
    noise_injection: str = "deterministic-from-seed"

    def __post_init__(self):
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ValueError(f"resolution must be a power of two >= 8, got {r}")
        if self.style_dim <= 0:
            raise ValueError("style_dim must be positive")
        if self.mapping_depth < 1:
            raise ValueError("mapping_depth must be >= 1")
        if self.channel_base <= 0 or self.channel_max <= 0:
            raise ValueError("channel widths must be positive")
        if self.noise_injection not in NOISE_MODES:
            raise ValueError(f"noise_injection must be one of {NOISE_MODES}")

    @property
    def layer_count_g(self) -> int:
        return int(math.log2(self.resolution)) - 1

    @property
    def layer_count_d(self) -> int:
        return int(math.log2(self.resolution)) - 1

    def channels(self, res: int) -> int:
        """Channel width of the block working at spatial size ``res``."""
        return min(self.channel_max, self.channel_base * self.resolution // res)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Per-block activations, ordered from the first block to the last."""

    levels: list[torch.Tensor]
    origin: str

    def __post_init__(self):
        if self.origin not in ("generator", "discriminator"):
            raise ValueError(f"unknown origin {self.origin!r}")
        sizes = [lvl.shape[-1] for lvl in self.levels]
        pairs = list(zip(sizes, sizes[1:]))
        if self.origin == "generator":
            ok = all(a < b for a, b in pairs)
        else:
            ok = all(a > b for a, b in pairs)
        if not ok:
            raise ValueError(f"spatial sizes {sizes} are not monotone for a {self.origin}")

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.levels[i]

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    def detach(self) -> FeaturePyramid:
        return FeaturePyramid([lvl.detach() for lvl in self.levels], self.origin)

    def select(self, index: torch.Tensor | Sequence[int]) -> FeaturePyramid:
        return FeaturePyramid([lvl[index] for lvl in self.levels], self.origin)

    @staticmethod
    def cat(pyramids: Sequence[FeaturePyramid]) -> FeaturePyramid:
        origin = pyramids[0].origin
        n = len(pyramids[0])
        return FeaturePyramid(
            [torch.cat([p.levels[i] for p in pyramids]) for i in range(n)], origin
        )


@dataclass
class ExtendedStyleCode:
    """One style vector per synthesis block for a single image, shape [layers, style_dim]."""

    per_layer: torch.Tensor

    def __post_init__(self):
        if self.per_layer.ndim != 2:
            raise ValueError("per_layer must be a [layers, style_dim] tensor")

    @classmethod
    def broadcast(cls, w: torch.Tensor, layers: int) -> ExtendedStyleCode:
        return cls(w.reshape(1, -1).repeat(layers, 1))

    def as_batch(self) -> torch.Tensor:
        return self.per_layer.unsqueeze(0)


# ---------------------------------------------------------------------------
# network modules


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + 1e-8)


class MappingNetwork(nn.Module):
    def __init__(self, style_dim: int, depth: int):
        super().__init__()
        layers: list[nn.Module] = [PixelNorm()]
        for _ in range(depth):
            layers += [nn.Linear(style_dim, style_dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class AdaIN(nn.Module):
    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.affine = nn.Linear(style_dim, 2 * channels)
        nn.init.zeros_(self.affine.bias)
        with torch.no_grad():
            self.affine.weight.mul_(0.25)

    def forward(self, x, w):
        gamma, beta = self.affine(w).unsqueeze(-1).unsqueeze(-1).chunk(2, dim=1)
        return F.instance_norm(x, eps=1e-5) * (1 + gamma) + beta


class SynthesisBlock(nn.Module):
    """(upsample) conv -> noise -> lrelu -> AdaIN(style) -> conv -> lrelu."""

    def __init__(self, in_ch: int, out_ch: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.noise_strength = nn.Parameter(torch.zeros(out_ch))
        self.adain = AdaIN(out_ch, style_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)

    def forward(self, x, w, noise=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv1(x)
        if noise is not None:
            x = x + self.noise_strength.view(1, -1, 1, 1) * noise
        x = F.leaky_relu(x, 0.2)
        x = self.adain(x, w)
        return F.leaky_relu(self.conv2(x), 0.2)


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.mapping = MappingNetwork(cfg.style_dim, cfg.mapping_depth)
        self.const = nn.Parameter(torch.randn(1, cfg.channels(4), 4, 4))
        blocks = []
        in_ch = cfg.channels(4)
        for i in range(cfg.layer_count_g):
            res = 4 * 2**i
            out_ch = cfg.channels(res)
            blocks.append(SynthesisBlock(in_ch, out_ch, cfg.style_dim, upsample=i > 0))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(in_ch, 3, 1)

    def synthesis(self, ws: torch.Tensor, noise: list[torch.Tensor] | None = None):
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x, ws[:, i], None if noise is None else noise[i])
            taps.append(x)
        return torch.tanh(self.to_rgb(x)), taps


class DiscriminatorBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, downsample: bool):
        super().__init__()
        self.downsample = downsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        if self.downsample:
            x = F.avg_pool2d(x, 2)
        return F.leaky_relu(self.conv(x), 0.2)


class Discriminator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        r = cfg.resolution
        self.from_rgb = nn.Conv2d(3, cfg.channels(r), 1)
        blocks = []
        in_ch = cfg.channels(r)
        for i in range(cfg.layer_count_d):
            out_ch = cfg.channels(r // 2**i)
            blocks.append(DiscriminatorBlock(in_ch, out_ch, downsample=i > 0))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.fc = nn.Linear(in_ch * 16, in_ch)
        self.out = nn.Linear(in_ch, 1)

    def forward(self, x):
        x = F.leaky_relu(self.from_rgb(x), 0.2)
        taps = []
        for block in self.blocks:
            x = block(x)
            taps.append(x)
        x = F.leaky_relu(self.fc(x.flatten(1)), 0.2)
        return self.out(x).squeeze(1), taps


# ---------------------------------------------------------------------------
# snapshots


@dataclass
class GanSnapshot:
    generator: Generator
    discriminator: Discriminator
    config: NetworkConfig
    step: int = 0
    role: str = "source"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")

    def named_parameters(self) -> list[tuple[str, torch.Tensor]]:
        """Canonical (name, tensor) order used for hashing and serialization."""
        out = [(f"generator.{k}", v) for k, v in self.generator.state_dict().items()]
        out += [(f"discriminator.{k}", v) for k, v in self.discriminator.state_dict().items()]
        return out

    def content_hash(self) -> str:
        return parameter_hash(self)

    def copy(self) -> GanSnapshot:
        return copy.deepcopy(self)

    def freeze(self) -> GanSnapshot:
        for p in list(self.generator.parameters()) + list(self.discriminator.parameters()):
            p.requires_grad_(False)
        self.generator.eval()
        self.discriminator.eval()
        return self

    def to(self, dtype: torch.dtype) -> GanSnapshot:
        self.generator.to(dtype)
        self.discriminator.to(dtype)
        return self


def parameter_hash(snapshot: GanSnapshot) -> str:
    h = hashlib.sha256()
    for name, tensor in snapshot.named_parameters():
        h.update(name.encode())
        h.update(tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def new_snapshot(config: NetworkConfig, seed: int = 0, role: str = "source") -> GanSnapshot:
    """Randomly initialized snapshot; initialization depends only on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(config)
        d = Discriminator(config)
    return GanSnapshot(g, d, config, step=0, role=role)


def init_target_from_source(source: GanSnapshot) -> GanSnapshot:
    if source.role != "source":
        raise ValueError(f"expected a source snapshot, got role={source.role!r}")
    target = copy.deepcopy(source)
    target.role = "target"
    target.step = 0
    for p in list(target.generator.parameters()) + list(target.discriminator.parameters()):
        p.requires_grad_(True)
    target.generator.train()
    target.discriminator.train()
    return target


# ---------------------------------------------------------------------------
# forward operations


def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise ValueError(f"{what} contains non-finite entries")


def map_noise(z: torch.Tensor, snapshot: GanSnapshot) -> torch.Tensor:
    """Map noise ``[style_dim]`` or ``[batch, style_dim]`` to style vectors of the same shape."""
    dim = snapshot.config.style_dim
    if z.shape[-1] != dim or z.ndim not in (1, 2):
        raise ValueError(f"noise must have trailing dimension {dim}, got shape {tuple(z.shape)}")
    _check_finite(z, "noise")
    single = z.ndim == 1
    w = snapshot.generator.mapping(z.reshape(-1, dim))
    return w[0] if single else w


def sample_noise(n: int, style_dim: int, seed: int) -> torch.Tensor:
    g = torch.Generator().manual_seed(int(seed))
    return torch.randn(n, style_dim, generator=g)


def _slot_key(seed: int, slot: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, slot]).generate_state(1)[0])


def noise_inputs(
    config: NetworkConfig,
    seed,
    batch: int,
    dtype: torch.dtype = torch.float32,
) -> list[torch.Tensor] | None:
    """Per-layer noise maps derived from the seed only.

    An integer seed gives sample ``i`` the noise keyed by ``(seed, i)``. A
    sequence gives sample ``i`` the key ``seeds[i]``, either an explicit
    ``(seed, slot)`` pair or a bare integer meaning ``(seed, 0)``.
    """
    if config.noise_injection == "off":
        return None
    if isinstance(seed, (int, np.integer)):
        keys = [_slot_key(seed, i) for i in range(batch)]
    else:
        seeds = list(seed)
        if len(seeds) != batch:
            raise ValueError(f"got {len(seeds)} noise seeds for a batch of {batch}")
        keys = [_slot_key(*s) if isinstance(s, tuple) else _slot_key(s, 0) for s in seeds]
    per_sample = []
    for key in keys:
        g = torch.Generator().manual_seed(key)
        per_sample.append(
            [torch.randn(1, 1, 4 * 2**i, 4 * 2**i, generator=g) for i in range(config.layer_count_g)]
        )
    return [torch.cat([s[i] for s in per_sample]).to(dtype) for i in range(config.layer_count_g)]


def _as_layer_codes(code, config: NetworkConfig) -> torch.Tensor:
    if isinstance(code, ExtendedStyleCode):
        code = code.as_batch()
    L, dim = config.layer_count_g, config.style_dim
    if code.shape[-1] != dim:
        raise ValueError(f"style vectors must have length {dim}, got {code.shape[-1]}")
    if code.ndim == 1:
        return code.view(1, 1, dim).expand(1, L, dim)
    if code.ndim == 2:
        return code.unsqueeze(1).expand(-1, L, -1)
    if code.ndim == 3:
        if code.shape[1] != L:
            raise ValueError(f"extended code has {code.shape[1]} layers, network has {L}")
        return code
    raise ValueError(f"unsupported code shape {tuple(code.shape)}")


def synthesize(code, snapshot: GanSnapshot, seed=0):
    """Render images from style codes.

    ``code`` is a single style vector ``[dim]``, a batch of style vectors
    ``[batch, dim]`` (both broadcast to every layer), an
    :class:`ExtendedStyleCode`, or a batch of extended codes ``[batch, layers, dim]``.
    Returns the image batch in [-1, 1] and the generator feature pyramid.
    """
    ws = _as_layer_codes(code, snapshot.config)
    _check_finite(ws, "style code")
    dtype = next(snapshot.generator.parameters()).dtype
    noise = noise_inputs(snapshot.config, seed, ws.shape[0], dtype)
    img, taps = snapshot.generator.synthesis(ws, noise)
    return img, FeaturePyramid(taps, "generator")


def generate(z: torch.Tensor, snapshot: GanSnapshot, seed=0):
    """Noise -> style -> image in one call."""
    return synthesize(map_noise(z, snapshot), snapshot, seed)


def discriminate(x: torch.Tensor, snapshot: GanSnapshot):
    r = snapshot.config.resolution
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != r or x.shape[3] != r:
        raise ValueError(f"expected images [batch, 3, {r}, {r}], got {tuple(x.shape)}")
    scores, taps = snapshot.discriminator(x)
    return scores, FeaturePyramid(taps, "discriminator")
