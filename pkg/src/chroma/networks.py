"""The two network branches and their joint forward pass.

The color-naming branch (CnNet) is a shallow fully convolutional
network: a 1x1 conv trunk, 3x3/2 max pool, 3x3/2 transposed conv back to
input size, a 1x1 skip branch on the raw input, channel concatenation,
a 1x1 classifier and a per-pixel softmax. At 227x227 the pool/upsample
arithmetic is exact (227 -> 113 -> 227); for other sizes the pool runs
in ceil mode and the upsampled map is cropped back to the input size,
so any input of at least 3x3 works.

The attention branch (VaNet) is a desk-scale encoder/decoder standing in
for a pretrained segmentation backbone, with the same structural slots:
conv/pool encoder stages, two fully connected bottleneck layers reshaped
onto the bottleneck grid, multiplicative modulation by the learned
spatial prior, transposed-conv upsampling, and a rectified one-channel
head. At the default 64x64 resolution with three stages the bottleneck
grid is 8x8 and the bottleneck widths are 512.

A network instance is single-writer during training; once loaded from a
checkpoint, read-only inference may be shared freely.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from chroma.modulation import (
    AttentionMap,
    ImageScore,
    SpatialPrior,
    aggregate_scores,
    modulate,
    spatial_prior_forward,
)
from chroma.tensor import (
    LOG_CLAMP,
    RunningStats,
    ShapeError,
    Tensor,
    _accum,
    _make_node,
    batchnorm,
    channel_softmax,
    concat_channels,
    conv2d,
    crop_spatial,
    deconv2d,
    fully_connected,
    maxpool2d,
    relu,
    reshape,
)

__all__ = [
    "ColorNameMap",
    "CnNet",
    "VaNet",
    "cn_forward",
    "va_forward",
    "full_forward",
    "masked_nll_loss",
]

logger = logging.getLogger(__name__)


@dataclass
class ColorNameMap:
    """Per-pixel probability distribution over the color vocabulary."""

    values: Tensor  # [H,W,C], every pixel on the simplex

    def argmax_map(self) -> np.ndarray:
        """Per-pixel winning class index (ties to the lowest index)."""
        return np.argmax(self.values.data, axis=2)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
            dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class _ParamStore:
    """Shared bookkeeping: named parameters and batchnorm statistics."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        self._params: dict[str, Tensor] = {}
        self._stats: dict[str, RunningStats] = {}

    def _param(self, name: str, values: np.ndarray) -> Tensor:
        t = Tensor(values.astype(self.dtype), requires_grad=True, op=name)
        self._params[name] = t
        return t

    def _bn(self, name: str, channels: int) -> tuple[Tensor, Tensor, RunningStats]:
        gamma = self._param(f"{name}.gamma", np.ones(channels))
        beta = self._param(f"{name}.beta", np.zeros(channels))
        stats = RunningStats.create(channels, dtype=self.dtype)
        self._stats[name] = stats
        return gamma, beta, stats

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def stats(self) -> dict[str, RunningStats]:
        return dict(self._stats)

    def set_trainable(self, flag: bool) -> None:
        for p in self._params.values():
            p.requires_grad = flag
            if flag and p.grad is None:
                p.grad = np.zeros_like(p.data)

    def zero_grads(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad[...] = 0.0

    def state_digest(self) -> bytes:
        """Hash of all parameters and statistics, for freeze contracts."""
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].data.tobytes())
        for name in sorted(self._stats):
            s = self._stats[name]
            h.update(s.mean.tobytes())
            h.update(s.var.tobytes())
        return h.digest()

    def _wrap_image(self, image) -> Tensor:
        if isinstance(image, Tensor):
            return image
        return Tensor(np.asarray(image, dtype=self.dtype))


class CnNet(_ParamStore):
    """Color-naming branch: image -> per-pixel class distribution.

    The final classifier conv starts at zero (all other weights are
    Xavier-initialized), so an untrained network outputs the uniform
    distribution at every pixel regardless of input.
    """

    def __init__(self, num_classes: int, width: int = 72, dtype=np.float64,
                 seed: int = 0):
        super().__init__(dtype)
        if num_classes < 2:
            raise ValueError("need at least two color classes")
        self.num_classes = num_classes
        self.width = width
        rng = np.random.default_rng(seed)
        w = width
        self._param("trunk.conv.w", _xavier(rng, (1, 1, 3, w), 3, w, self.dtype))
        self._param("trunk.conv.b", np.zeros(w))
        self.trunk_bn = self._bn("trunk.bn", w)
        self._param("up.deconv.w", _xavier(rng, (3, 3, w, w), 9 * w, 9 * w,
                                           self.dtype))
        self.up_bn = self._bn("up.bn", w)
        self._param("skip.conv.w", _xavier(rng, (1, 1, 3, w), 3, w, self.dtype))
        self._param("skip.conv.b", np.zeros(w))
        self.skip_bn = self._bn("skip.bn", w)
        self._param("head.conv.w", np.zeros((1, 1, 2 * w, num_classes)))
        self._param("head.conv.b", np.zeros(num_classes))

    @staticmethod
    def geometry(h: int) -> tuple[int, int]:
        """(pooled, upsampled) sizes for one spatial dimension."""
        pooled = -(-(h - 3) // 2) + 1
        return pooled, (pooled - 1) * 2 + 3

    def _validate(self, image: Tensor) -> None:
        if image.data.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"CnNet expects an [H,W,3] image, got {image.shape}")
        h, w = image.shape[:2]
        if h < 3 or w < 3:
            raise ShapeError(f"CnNet input {h}x{w} too small; valid sizes are "
                             f"any H, W >= 3")
        if float(image.data.min()) < 0.0 or float(image.data.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    def forward(self, image, train: bool = False) -> Tensor:
        x = self._wrap_image(image)
        self._validate(x)
        h, w = x.shape[:2]
        mode = "online" if train else "eval"
        p = self._params

        t = conv2d(x, p["trunk.conv.w"], p["trunk.conv.b"])
        t = relu(batchnorm(t, *self.trunk_bn, mode=mode))
        t = maxpool2d(t, 3, 2, ceil_mode=True)
        t = deconv2d(t, p["up.deconv.w"], stride=2)
        t = relu(batchnorm(t, *self.up_bn, mode=mode))
        if t.shape[:2] != (h, w):
            t = crop_spatial(t, h, w)

        s = conv2d(x, p["skip.conv.w"], p["skip.conv.b"])
        s = relu(batchnorm(s, *self.skip_bn, mode=mode))

        logits = conv2d(concat_channels(t, s), p["head.conv.w"], p["head.conv.b"])
        return channel_softmax(logits)

    def hyper(self) -> dict:
        return {"num_classes": self.num_classes, "width": self.width}


class VaNet(_ParamStore):
    """Attention branch: image -> non-negative relevance map.

    Built for one square input resolution (the bottleneck FC widths
    depend on it); ``resolution`` must be divisible by 2**stages down to
    a grid of at least 2.
    """

    def __init__(self, resolution: int = 64, stages: int = 3,
                 channels: tuple[int, ...] = (16, 32, 64),
                 fc_width: int = 512, bottleneck_channels: int = 8,
                 dec_channels: tuple[int, ...] = (32, 16, 8),
                 use_prior: bool = True, dtype=np.float64, seed: int = 0):
        super().__init__(dtype)
        if stages < 1 or len(channels) != stages or len(dec_channels) != stages:
            raise ValueError("need one encoder and one decoder width per stage")
        grid = resolution
        for _ in range(stages):
            grid = -(-grid // 2)  # ceil-mode k2/s2 pooling halves, rounding up
        if grid < 2:
            raise ShapeError(f"resolution {resolution} collapses below a 2x2 "
                             f"grid after {stages} stages")
        self.resolution = resolution
        self.stages = stages
        self.channels = tuple(channels)
        self.fc_width = fc_width
        self.bottleneck_channels = bottleneck_channels
        self.dec_channels = tuple(dec_channels)
        self.use_prior = use_prior
        self.grid = grid

        rng = np.random.default_rng(seed)
        prev = 3
        self.enc_bns = []
        for i, ch in enumerate(self.channels):
            self._param(f"enc{i}.conv.w",
                        _xavier(rng, (3, 3, prev, ch), 9 * prev, 9 * ch, self.dtype))
            self._param(f"enc{i}.conv.b", np.zeros(ch))
            self.enc_bns.append(self._bn(f"enc{i}.bn", ch))
            prev = ch
        flat = grid * grid * prev
        bottleneck = grid * grid * bottleneck_channels
        self._param("fc1.w", _xavier(rng, (flat, fc_width), flat, fc_width,
                                     self.dtype))
        self._param("fc1.b", np.zeros(fc_width))
        self._param("fc2.w", _xavier(rng, (fc_width, bottleneck), fc_width,
                                     bottleneck, self.dtype))
        self._param("fc2.b", np.zeros(bottleneck))
        if use_prior:
            self.prior = SpatialPrior(grid, dtype=self.dtype)
            self._params["prior.kernel"] = self.prior.kernel
        else:
            self.prior = None
        prev = bottleneck_channels
        self.dec_bns = []
        for i, ch in enumerate(self.dec_channels):
            self._param(f"dec{i}.deconv.w",
                        _xavier(rng, (2, 2, ch, prev), 4 * prev, 4 * ch, self.dtype))
            self.dec_bns.append(self._bn(f"dec{i}.bn", ch))
            prev = ch
        self._param("head.conv.w", _xavier(rng, (3, 3, prev, 1), 9 * prev, 9,
                                           self.dtype))
        self._param("head.conv.b", np.zeros(1))

    def _validate(self, image: Tensor) -> None:
        if image.data.ndim != 3 or image.shape[2] != 3:
            raise ShapeError(f"VaNet expects an [H,W,3] image, got {image.shape}")
        r = self.resolution
        if image.shape[:2] != (r, r):
            raise ShapeError(f"VaNet was built for {r}x{r} inputs, got "
                             f"{image.shape[0]}x{image.shape[1]}")
        if float(image.data.min()) < 0.0 or float(image.data.max()) > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    def forward(self, image, train: bool = False) -> Tensor:
        x = self._wrap_image(image)
        self._validate(x)
        mode = "online" if train else "eval"
        p = self._params

        h = x
        for i in range(self.stages):
            h = conv2d(h, p[f"enc{i}.conv.w"], p[f"enc{i}.conv.b"], padding=1)
            h = relu(batchnorm(h, *self.enc_bns[i], mode=mode))
            h = maxpool2d(h, 2, 2, ceil_mode=True)
        g = self.grid
        flat = reshape(h, (g * g * self.channels[-1],))
        z = relu(fully_connected(flat, p["fc1.w"], p["fc1.b"]))
        z = relu(fully_connected(z, p["fc2.w"], p["fc2.b"]))
        h = reshape(z, (g, g, self.bottleneck_channels))
        if self.prior is not None:
            prior_field = spatial_prior_forward(self.prior, stride=4,
                                                expected_hw=(g, g))
            h = modulate(h, AttentionMap(prior_field))
        for i in range(self.stages):
            h = deconv2d(h, p[f"dec{i}.deconv.w"], stride=2)
            h = relu(batchnorm(h, *self.dec_bns[i], mode=mode))
        if h.shape[:2] != (self.resolution, self.resolution):
            h = crop_spatial(h, self.resolution, self.resolution)
        a = relu(conv2d(h, p["head.conv.w"], p["head.conv.b"], padding=1))
        return reshape(a, (self.resolution, self.resolution))

    def hyper(self) -> dict:
        return {
            "resolution": self.resolution,
            "stages": self.stages,
            "channels": self.channels,
            "fc_width": self.fc_width,
            "bottleneck_channels": self.bottleneck_channels,
            "dec_channels": self.dec_channels,
            "use_prior": self.use_prior,
        }


def cn_forward(net: CnNet, image, train: bool = False) -> ColorNameMap:
    """Per-pixel color-name distribution for an image."""
    return ColorNameMap(net.forward(image, train=train))


def va_forward(net: VaNet, image, train: bool = False) -> AttentionMap:
    """Attention map for an image; entries are non-negative."""
    return AttentionMap(net.forward(image, train=train))


def full_forward(cn: CnNet, va: VaNet, image, train: bool = False
                 ) -> tuple[ColorNameMap, AttentionMap, ImageScore]:
    """Run both branches and aggregate the modulated map into a score."""
    y_map = cn_forward(cn, image, train=train)
    attention = va_forward(va, image, train=train)
    score = aggregate_scores(modulate(y_map.values, attention))
    return y_map, attention, score


def masked_nll_loss(y_map: ColorNameMap, mask: np.ndarray, label: int) -> Tensor:
    """Mean negative log-likelihood of ``label`` over salient pixels.

    Pixels where the mask is zero contribute nothing (they are excluded
    from the computation entirely, so perturbing them leaves the loss
    bit-identical). An empty mask yields a constant zero loss with a
    logged warning.
    """
    y = y_map.values if isinstance(y_map, ColorNameMap) else y_map
    if y.data.ndim != 3:
        raise ShapeError(f"masked_nll_loss: map must be [H,W,C], got {y.shape}")
    if mask.shape != y.shape[:2]:
        raise ShapeError(f"masked_nll_loss: mask {mask.shape} does not match "
                         f"map {y.shape[:2]}")
    if not 0 <= label < y.shape[2]:
        raise IndexError(f"label {label} out of range for {y.shape[2]} classes")
    salient = np.asarray(mask) > 0
    n = int(salient.sum())
    if n == 0:
        logger.warning("masked_nll_loss: empty saliency mask, loss is 0")
        return Tensor(np.asarray(0.0, dtype=y.dtype), op="masked_nll_loss")
    clamped = np.maximum(y.data[:, :, label][salient], LOG_CLAMP)
    loss = -float(np.log(clamped).sum()) / n
    result = _make_node(np.asarray(loss, dtype=y.dtype), "masked_nll_loss", (y,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            dy = np.zeros_like(y.data)
            channel = dy[:, :, label]
            channel[salient] = -float(g) / (clamped * n)
            _accum(y, dy)
        result._backward_fn = _backward
    return result
