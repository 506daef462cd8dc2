"""Weighted fusion of RGB and depth feature maps.

The fusion block blends the two modality streams channel by channel:
add the feature maps, pool the sum to per-channel statistics, push the
statistics through a bottleneck perceptron with two separate output
heads, softmax the two heads against each other, and apply the resulting
per-channel weight pair as a convex combination of the original maps.
The weight pair always sums to one per channel, so the fused map never
leaves the envelope spanned by the two inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeMismatchError,
    Tensor,
    add,
    concat,
    fully_connected,
    global_avg_pool,
    mul,
    narrow,
    relu,
    reshape,
    softmax,
)

__all__ = ["WffParams", "FusionWeights", "combine", "reduce", "pre_divide", "normalize", "fuse", "wff_forward"]


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled uniform init, bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class WffParams:
    """Parameters of one fusion site: bottleneck layer plus two heads.

    The bottleneck halves the channel count; the two heads restore it.
    ``hidden_relu`` optionally activates the bottleneck output (off by
    default: the weight path is purely linear).
    """

    fc1_w: Tensor
    fc1_b: Tensor
    fc21_w: Tensor
    fc21_b: Tensor
    fc22_w: Tensor
    fc22_b: Tensor
    hidden_relu: bool = False

    def __post_init__(self):
        c = self.channels
        if c % 2 != 0:
            raise ValueError(f"fusion channel count must be even, got {c}")
        if self.fc1_w.shape != (c // 2, c):
            raise ShapeMismatchError(f"fc1 weight {self.fc1_w.shape} does not map {c} -> {c // 2}")
        if self.fc21_w.shape != self.fc22_w.shape or self.fc21_w.shape != (c, c // 2):
            raise ShapeMismatchError(
                f"head weights must both map {c // 2} -> {c}, got {self.fc21_w.shape} and {self.fc22_w.shape}"
            )

    @property
    def channels(self) -> int:
        return self.fc1_w.shape[1]

    @classmethod
    def initialize(cls, channels: int, rng: np.random.Generator, dtype=np.float32, hidden_relu: bool = False) -> "WffParams":
        if channels % 2 != 0:
            raise ValueError(f"fusion channel count must be even, got {channels}")
        half = channels // 2
        return cls(
            fc1_w=Tensor(he_uniform(rng, (half, channels), channels, dtype), requires_grad=True),
            fc1_b=Tensor(np.zeros(half, dtype), requires_grad=True),
            fc21_w=Tensor(he_uniform(rng, (channels, half), half, dtype), requires_grad=True),
            fc21_b=Tensor(np.zeros(channels, dtype), requires_grad=True),
            fc22_w=Tensor(he_uniform(rng, (channels, half), half, dtype), requires_grad=True),
            fc22_b=Tensor(np.zeros(channels, dtype), requires_grad=True),
            hidden_relu=hidden_relu,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.fc1.weight": self.fc1_w,
            f"{prefix}.fc1.bias": self.fc1_b,
            f"{prefix}.fc21.weight": self.fc21_w,
            f"{prefix}.fc21.bias": self.fc21_b,
            f"{prefix}.fc22.weight": self.fc22_w,
            f"{prefix}.fc22.bias": self.fc22_b,
        }


@dataclass
class FusionWeights:
    """Per-channel modality weights, one pair per batch item, summing to 1."""

    psi_rgb: Tensor
    psi_depth: Tensor

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self.psi_rgb.data, self.psi_depth.data

    def to_jsonable(self) -> dict:
        """Weight vectors of the first batch item as plain lists."""
        return {
            "psi_rgb": [float(v) for v in self.psi_rgb.data[0]],
            "psi_depth": [float(v) for v in self.psi_depth.data[0]],
        }


def combine(r: Tensor, d: Tensor) -> Tensor:
    """Elementwise sum of the two modality maps."""
    if r.shape != d.shape:
        raise ShapeMismatchError(f"combine: rgb features {r.shape} vs depth features {d.shape}")
    return add(r, d)


def reduce(combined: Tensor) -> Tensor:
    """Collapse spatial dims to per-channel means: [N,C,h,w] -> [N,C]."""
    n, c = combined.shape[0], combined.shape[1]
    return reshape(global_avg_pool(combined), (n, c))


def pre_divide(pooled: Tensor, params: WffParams) -> tuple[Tensor, Tensor]:
    """Bottleneck then two separate heads: [N,C] -> ([N,C], [N,C])."""
    if pooled.shape[1] != params.channels:
        raise ShapeMismatchError(
            f"pre_divide: pooled features have {pooled.shape[1]} channels, params expect {params.channels}"
        )
    hidden = fully_connected(pooled, params.fc1_w, params.fc1_b)
    if params.hidden_relu:
        hidden = relu(hidden)
    psi1 = fully_connected(hidden, params.fc21_w, params.fc21_b)
    psi2 = fully_connected(hidden, params.fc22_w, params.fc22_b)
    return psi1, psi2


def normalize(psi1: Tensor, psi2: Tensor) -> FusionWeights:
    """Softmax the two head outputs against each other, per channel.

    Implemented by stacking the heads on a fresh axis and running the
    stabilized softmax along it, so swapping the inputs swaps the outputs
    bit-exactly.
    """
    if psi1.shape != psi2.shape:
        raise ShapeMismatchError(f"normalize: {psi1.shape} vs {psi2.shape}")
    n, c = psi1.shape
    stacked = concat([reshape(psi1, (n, 1, c)), reshape(psi2, (n, 1, c))], axis=1)
    weights = softmax(stacked, axis=1)
    return FusionWeights(
        psi_rgb=reshape(narrow(weights, 1, 0, 1), (n, c)),
        psi_depth=reshape(narrow(weights, 1, 1, 1), (n, c)),
    )


def fuse(r: Tensor, d: Tensor, weights: FusionWeights) -> Tensor:
    """Convex combination of the two maps under per-channel weights."""
    if r.shape != d.shape:
        raise ShapeMismatchError(f"fuse: rgb features {r.shape} vs depth features {d.shape}")
    n, c = r.shape[0], r.shape[1]
    if weights.psi_rgb.shape != (n, c):
        raise ShapeMismatchError(
            f"fuse: weights for {weights.psi_rgb.shape} channels against features {r.shape}"
        )
    w_rgb = reshape(weights.psi_rgb, (n, c, 1, 1))
    w_depth = reshape(weights.psi_depth, (n, c, 1, 1))
    return add(mul(r, w_rgb), mul(d, w_depth))


def wff_forward(r: Tensor, d: Tensor, params: WffParams) -> tuple[Tensor, FusionWeights]:
    """Full fusion pass; returns the fused map and the weights used.

    The weights are surfaced on every call so callers can inspect how the
    blend shifted between modalities for a given input.
    """
    pooled = reduce(combine(r, d))
    psi1, psi2 = pre_divide(pooled, params)
    weights = normalize(psi1, psi2)
    return fuse(r, d, weights), weights
