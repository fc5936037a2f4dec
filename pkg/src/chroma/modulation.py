"""Attention modulation, the learned spatial prior, and score aggregation.

The modulation layer multiplies every channel of a per-pixel score map
by a single attention map. Its backward rule is written out explicitly:
the gradient reaching each channel is the attention map times the
upstream gradient, and the gradient reaching the attention map is the
channel sum of upstream-times-channel. With an all-ones upstream this
reduces to exactly A per channel and sum_k Y_k on the attention side,
which the tests assert bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from chroma.tensor import (
    Tensor,
    ShapeError,
    _make_node,
    _accum,
    deconv2d,
    global_avgpool,
    reshape,
    vector_softmax,
)

__all__ = [
    "AttentionMap",
    "ImageScore",
    "SpatialPrior",
    "modulate",
    "spatial_prior_forward",
    "aggregate_scores",
    "gaussian_kernel",
]

# test hook: when True, the modulation backward is deliberately wrong so
# the gradient-check command can prove it catches broken backward rules
_corrupt_backward = False


@dataclass
class AttentionMap:
    """Single-channel non-negative relevance map over an image."""

    values: Tensor  # [H, W]

    def __post_init__(self):
        if self.values.data.ndim != 2:
            raise ShapeError(f"AttentionMap must be [H,W], got {self.values.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape


@dataclass
class ImageScore:
    """Image-level class distribution on the probability simplex."""

    y_hat: Tensor  # [C]

    def argmax(self) -> int:
        return int(np.argmax(self.y_hat.data))

    def probabilities(self) -> np.ndarray:
        return self.y_hat.data.copy()


class SpatialPrior:
    """Learned center-bias layer.

    A fixed 1x1 input of value one is pushed through a learned
    deconvolution, so the forward output simply *is* the kernel; training
    the kernel learns where principal objects tend to sit. The kernel is
    initialized to a discrete Gaussian bump (sigma = k/4) and the unit
    input never receives gradient.
    """

    def __init__(self, size: int, dtype=np.float64):
        if size < 1:
            raise ValueError("spatial prior size must be >= 1")
        self.kernel = Tensor(gaussian_kernel(size, size / 4.0, dtype),
                             requires_grad=True, op="prior_kernel")
        self.unit_input = Tensor(np.ones((1, 1, 1), dtype=dtype), op="prior_unit")

    @property
    def size(self) -> int:
        return self.kernel.shape[0]


def gaussian_kernel(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    """Discrete Gaussian bump with peak value 1, centered on the grid."""
    c = (size - 1) / 2.0
    idx = np.arange(size, dtype=dtype)
    d2 = (idx - c) ** 2
    if sigma <= 0:
        out = np.zeros((size, size), dtype=dtype)
        out[int(round(c)), int(round(c))] = 1.0
        return out
    return np.exp(-(d2[:, None] + d2[None, :]) / (2.0 * sigma * sigma)).astype(dtype)


def modulate(y: Tensor, attention: AttentionMap) -> Tensor:
    """Multiply every channel of ``y`` [H,W,C] by the attention map."""
    a = attention.values
    if y.data.ndim != 3:
        raise ShapeError(f"modulate: score map must be [H,W,C], got {y.shape}")
    if a.shape != y.shape[:2]:
        raise ShapeError(f"modulate: spatial dims differ, map {y.shape[:2]} vs "
                         f"attention {a.shape}")
    out = y.data * a.data[:, :, None]
    result = _make_node(out, "modulate", (y, a))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if _corrupt_backward:
                g = g + 1.0
            if y.requires_grad or y._parents:
                _accum(y, a.data[:, :, None] * g)
            if a.requires_grad or a._parents:
                _accum(a, (g * y.data).sum(axis=2))
        result._backward_fn = _backward
    return result


def spatial_prior_forward(prior: SpatialPrior, stride: int,
                          expected_hw: tuple[int, int] | None = None) -> Tensor:
    """Deconvolve the fixed unit input; output equals the kernel.

    ``expected_hw`` asserts the prior matches the bottleneck grid it is
    about to modulate.
    """
    k = prior.size
    if expected_hw is not None and (k, k) != tuple(expected_hw):
        raise ShapeError(f"spatial prior is {k}x{k} but the bottleneck grid is "
                         f"{expected_hw[0]}x{expected_hw[1]}")
    kernel4d = reshape(prior.kernel, (k, k, 1, 1))
    out = deconv2d(prior.unit_input, kernel4d, stride=stride)
    return reshape(out, (k, k))


def aggregate_scores(y_hat: Tensor) -> ImageScore:
    """Global average pool per channel, then softmax, as an ImageScore."""
    pooled = global_avgpool(y_hat)
    return ImageScore(vector_softmax(pooled))
