"""Transfer objectives: kernel MMD feature alignment, adversarial terms and their totals.

Distillation always compares pooled features (global average pooling per
channel) layer by layer and averages over the selected layers. The first
pyramid of every pair is the frozen teacher side and is detached.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .backbone import FeaturePyramid, GanSnapshot, discriminate

KERNELS = ("rbf-multiscale", "linear")
METRICS = ("mmd", "l2")
BANDWIDTH_MODES = ("median", "fixed")


@dataclass(frozen=True)
class MMDConfig:
    kernel: str = "rbf-multiscale"
    # scale factors on the median pairwise distance, or absolute sigmas when fixed
    bandwidths: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0, 8.0)
    bandwidth_mode: str = "median"
    estimator: str = "biased"
    metric: str = "mmd"
    take_sqrt: bool = False

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.bandwidth_mode not in BANDWIDTH_MODES:
            raise ValueError(f"bandwidth_mode must be one of {BANDWIDTH_MODES}")
        if self.estimator != "biased":
            raise ValueError("only the biased estimator is supported")
        if not self.bandwidths or any(b <= 0 for b in self.bandwidths):
            raise ValueError("bandwidths must be a nonempty list of positive values")
        object.__setattr__(self, "bandwidths", tuple(float(b) for b in self.bandwidths))


def default_lower_layers(layer_count: int) -> tuple[int, ...]:
    """The lower ~4/7 of the blocks (layers 1-4 of a 7-block network)."""
    return tuple(range(1, math.ceil(4 * layer_count / 7) + 1))


@dataclass(frozen=True)
class LayerMask:
    generator_layers: tuple[int, ...] = (1, 2, 3, 4)
    discriminator_layers: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self):
        for name in ("generator_layers", "discriminator_layers"):
            idx = tuple(int(i) for i in getattr(self, name))
            if not idx:
                raise ValueError(f"{name} must be nonempty")
            if min(idx) < 1:
                raise ValueError(f"{name} indices are 1-based, got {idx}")
            object.__setattr__(self, name, idx)

    @classmethod
    def lower(cls, layer_count: int) -> LayerMask:
        layers = default_lower_layers(layer_count)
        return cls(layers, layers)

    def validate(self, layer_count_g: int, layer_count_d: int):
        if max(self.generator_layers) > layer_count_g:
            raise ValueError(f"generator layer mask {self.generator_layers} exceeds {layer_count_g} layers")
        if max(self.discriminator_layers) > layer_count_d:
            raise ValueError(
                f"discriminator layer mask {self.discriminator_layers} exceeds {layer_count_d} layers"
            )


@dataclass(frozen=True)
class LossWeights:
    lambda2: float = 5.0
    lambda3: float = 1.0
    lambda4: float = 1.0

    def __post_init__(self):
        if min(self.lambda2, self.lambda3, self.lambda4) < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# primitives


def pool(features: FeaturePyramid, layer: int) -> torch.Tensor:
    """Global average pooling of the 1-based ``layer``: [batch, c, h, w] -> [batch, c]."""
    if not 1 <= layer <= len(features):
        raise IndexError(f"layer {layer} out of range 1..{len(features)}")
    return features[layer - 1].mean(dim=(2, 3))


def _pairwise_sq_dists(z: torch.Tensor) -> torch.Tensor:
    # explicit differences (no Gram trick) so equal rows give bit-equal entries
    return (z[:, None, :] - z[None, :, :]).pow(2).sum(-1)


def _median_sq_dist(d2: torch.Tensor) -> torch.Tensor:
    n = d2.shape[0]
    iu = torch.triu_indices(n, n, offset=1)
    vals = d2[iu[0], iu[1]]
    if vals.numel() == 0:
        return d2.new_ones(())
    med = vals.median()
    if med.item() <= 0:
        return d2.new_ones(())
    return med


def mmd(A: torch.Tensor, B: torch.Tensor, cfg: MMDConfig = MMDConfig()) -> torch.Tensor:
    """Biased (V-statistic) squared MMD between the row sets ``A`` [n, d] and ``B`` [m, d]."""
    if A.ndim != 2 or B.ndim != 2:
        raise ValueError("mmd expects two matrices")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    n, m = A.shape[0], B.shape[0]
    if n < 1 or m < 1:
        raise ValueError("mmd needs at least one sample per set")

    if cfg.kernel == "linear":
        diff = A.mean(0) - B.mean(0)
        value = diff.pow(2).sum()
    else:
        z = torch.cat([A, B])
        d2 = _pairwise_sq_dists(z)
        if cfg.bandwidth_mode == "median":
            base = _median_sq_dist(d2)
            sigmas2 = [s * s * base for s in cfg.bandwidths]
        else:
            sigmas2 = [s * s for s in cfg.bandwidths]
        K = sum(torch.exp(-d2 / (2 * s2)) for s2 in sigmas2)
        value = K[:n, :n].mean() + K[n:, n:].mean() - 2 * K[:n, n:].mean()

    if cfg.take_sqrt:
        value = torch.where(value > 0, value.clamp_min(1e-30).sqrt(), torch.zeros_like(value))
    return value


def l2_feature_distance(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between paired feature rows."""
    if A.shape != B.shape:
        raise ValueError(f"paired features must share a shape, got {tuple(A.shape)} and {tuple(B.shape)}")
    return (A - B).pow(2).mean()


def feature_distance(A: torch.Tensor, B: torch.Tensor, cfg: MMDConfig) -> torch.Tensor:
    if cfg.metric == "l2":
        return l2_feature_distance(A, B)
    return mmd(A, B, cfg)


def pyramid_distance(
    teacher: FeaturePyramid,
    student: FeaturePyramid,
    layers: Sequence[int],
    cfg: MMDConfig,
) -> torch.Tensor:
    """Mean over ``layers`` of the pooled-feature distance; teacher side detached."""
    if len(teacher) != len(student):
        raise ValueError(f"pyramids have {len(teacher)} and {len(student)} levels")
    terms = []
    for i in layers:
        a = pool(teacher, i).detach()
        b = pool(student, i)
        if a.shape[1] != b.shape[1]:
            raise ValueError(f"channel mismatch at layer {i}: {a.shape[1]} vs {b.shape[1]}")
        terms.append(feature_distance(a, b, cfg))
    return torch.stack(terms).mean()


# ---------------------------------------------------------------------------
# distillation terms


def generator_distillation(
    F_s: FeaturePyramid, F_t: FeaturePyramid, mask: LayerMask, cfg: MMDConfig = MMDConfig()
) -> torch.Tensor:
    """Align pooled source-generator features of inverted codes with target-generator features of fresh noise."""
    return pyramid_distance(F_s, F_t, mask.generator_layers, cfg)


def discriminator_distillation(
    E_s_real: FeaturePyramid,
    E_t_real: FeaturePyramid,
    E_s_fake: FeaturePyramid,
    E_t_fake: FeaturePyramid,
    mask: LayerMask,
    cfg: MMDConfig = MMDConfig(),
) -> torch.Tensor:
    layers = mask.discriminator_layers
    return pyramid_distance(E_s_real, E_t_real, layers, cfg) + pyramid_distance(
        E_s_fake, E_t_fake, layers, cfg
    )


def generator_regularization(
    E_s_real: FeaturePyramid, E_s_fake: FeaturePyramid, mask: LayerMask, cfg: MMDConfig = MMDConfig()
) -> torch.Tensor:
    """Pull source-discriminator features of generated images toward those of real images.

    The real side is a constant; gradients reach the generator through the
    fake pyramid only.
    """
    return pyramid_distance(E_s_real, E_s_fake, mask.discriminator_layers, cfg)


# ---------------------------------------------------------------------------
# adversarial terms


def adversarial_g(fake_scores: torch.Tensor) -> torch.Tensor:
    if fake_scores.numel() == 0:
        raise ValueError("empty score vector")
    return -fake_scores.mean()


def adversarial_d(fake_scores: torch.Tensor, real_scores: torch.Tensor) -> torch.Tensor:
    if fake_scores.numel() == 0 or real_scores.numel() == 0:
        raise ValueError("empty score vector")
    return fake_scores.mean() - real_scores.mean()


def r1_penalty(
    real_images: torch.Tensor,
    critic: GanSnapshot | Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Mean over the batch of the squared norm of d(score)/d(pixels) at real images."""
    x = real_images.detach().requires_grad_(True)
    if isinstance(critic, GanSnapshot):
        scores, _ = discriminate(x, critic)
    else:
        scores = critic(x)
    if not scores.requires_grad:
        return x.new_zeros(())
    (grad,) = torch.autograd.grad(scores.sum(), x, create_graph=True, allow_unused=True)
    if grad is None:
        return x.new_zeros(())
    return grad.pow(2).flatten(1).sum(1).mean()


def total_g(adv, dis, reg, w: LossWeights):
    return adv + w.lambda2 * dis + w.lambda3 * reg


def total_d(adv, dis, r1, w: LossWeights, r1_gamma: float = 1.0):
    return adv + w.lambda4 * dis + r1_gamma * r1
