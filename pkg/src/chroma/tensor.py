"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and, when gradients are enabled,
remembers the operation and the input tensors that produced it. The
computation graph is therefore implicit: it is the DAG of ``_parents``
links reachable from an output tensor. ``Tensor.backward`` performs a
topological traversal of that DAG and runs each node's backward rule
exactly once, accumulating gradients into every leaf created with
``requires_grad=True``.

Two float widths are supported. Tests and gradient checks run in 64-bit
(the module default); training code constructs its parameters in 32-bit
for speed and so that checkpoints (which store 32-bit floats) round-trip
bit-exactly. Scalar constants in the op implementations are Python
floats, which never upcast 32-bit arrays.

All layer primitives treat the last axis as the channel axis and carry
no batch dimension; mini-batching is done by accumulating gradients over
per-image graphs (see ``Tensor.backward``'s ``seed`` argument).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "OptimizerState",
    "no_grad",
    "set_default_dtype",
    "default_dtype",
    "conv2d",
    "deconv2d",
    "maxpool2d",
    "global_avgpool",
    "batchnorm",
    "RunningStats",
    "relu",
    "channel_softmax",
    "vector_softmax",
    "concat_channels",
    "slice_channels",
    "crop_spatial",
    "reshape",
    "tensor_sum",
    "fully_connected",
    "cross_entropy",
    "sgd_step",
    "finite_diff_check",
]

BN_EPSILON = 1e-5
BN_STAT_DECAY = 0.9
LOG_CLAMP = 1e-12

_DEFAULT_DTYPE = np.float64
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with an operation."""


def set_default_dtype(dtype) -> None:
    """Set the float width used for tensors built from plain Python data."""
    global _DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = np.dtype(dtype).type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that disables graph construction.

    Ops executed inside the context produce constant tensors with no
    parents, so frozen-branch forward passes cost no graph memory and
    stop gradient flow.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float array, optionally part of a differentiable graph.

    Values are immutable by convention once a tensor has been used in a
    forward computation; the optimizer mutates parameter ``data`` in
    place only between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward_fn",
                 "_backward_run")

    def __init__(self, data, requires_grad: bool = False, dtype=None, op: str = "leaf",
                 parents: tuple = ()):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        else:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = parents
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._backward_run = False
        # Leaves that require gradients get a zero buffer eagerly, so a
        # leaf that never appears on the path to a loss reads as zero.
        self.grad: np.ndarray | None = (
            np.zeros_like(arr) if (requires_grad and not parents) else None
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def backward(self, seed: float = 1.0) -> None:
        """Populate gradients of every tensor this scalar depends on.

        ``seed`` scales the root gradient; accumulating per-image losses
        with ``seed=1/batch`` realizes a mean batch loss without keeping
        all the per-image graphs alive at once.

        Raises if called twice on the same output, if the output is not
        scalar, or if any tensor in the graph holds non-finite values.
        """
        if self.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if self._backward_run:
            raise RuntimeError("backward already run for this graph; build a fresh "
                               "forward pass before calling backward again")
        order = self._toposort()
        for t in order:
            if not np.isfinite(t.data).all():
                raise FloatingPointError(
                    f"non-finite values encountered in node '{t.op}' during backward")
        self.grad = np.full_like(self.data, seed)
        for t in reversed(order):
            if t._backward_fn is not None and t.grad is not None:
                t._backward_fn(t.grad)
        self._backward_run = True

    def _toposort(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


def _make_node(data: np.ndarray, op: str, parents: Sequence[Tensor]) -> Tensor:
    """Wrap an op result; detaches automatically when grads are disabled."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents))
    return Tensor(data, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution machinery


def _window_view(arr: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Strided view [oh, ow, k, k, C] of sliding kxk windows."""
    h, w, c = arr.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2 = arr.strides
    return np.lib.stride_tricks.as_strided(
        arr,
        shape=(oh, ow, k, k, c),
        strides=(s0 * stride, s1 * stride, s0, s1, s2),
        writeable=False,
    )


def _im2col(arr: np.ndarray, k: int, stride: int) -> np.ndarray:
    """[oh*ow, k*k*C] patch matrix (materialized copy)."""
    win = _window_view(arr, k, stride)
    oh, ow = win.shape[:2]
    return win.reshape(oh * ow, k * k * arr.shape[2])


def _col2im(cols: np.ndarray, h: int, w: int, c: int, k: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add patches back onto an h x w grid."""
    out = np.zeros((h, w, c), dtype=cols.dtype)
    patches = cols.reshape(oh, ow, k, k, c)
    for dy in range(k):
        for dx in range(k):
            out[dy:dy + oh * stride:stride, dx:dx + ow * stride:stride] += \
                patches[:, :, dy, dx]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation of [H,W,Cin] with a [k,k,Cin,Cout] kernel."""
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be [H,W,C], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel must be [k,k,Cin,Cout], got {kernel.shape}")
    k = kernel.shape[0]
    cin, cout = kernel.shape[2], kernel.shape[3]
    if x.shape[2] != cin:
        raise ShapeError(f"conv2d: input channel dim {x.shape[2]} != kernel "
                         f"input channels {cin} (kernel dim 2)")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},) "
                         f"(kernel dim 3)")
    if k < 1 or stride < 1 or padding < 0:
        raise ValueError("conv2d: need k >= 1, stride >= 1, padding >= 0")
    h, w = x.shape[0], x.shape[1]
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {k} with padding {padding} does not fit "
                         f"input {h}x{w}")
    padded = (np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
              if padding else x.data)
    cols = _im2col(padded, k, stride)
    kmat = kernel.data.reshape(k * k * cin, cout)
    out2d = cols @ kmat
    out2d += bias.data
    result = _make_node(out2d.reshape(oh, ow, cout), "conv2d", (x, kernel, bias))

    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            g2 = g.reshape(oh * ow, cout)
            if kernel.requires_grad or kernel._parents:
                _accum(kernel, (cols.T @ g2).reshape(kernel.shape))
            if bias.requires_grad or bias._parents:
                _accum(bias, g2.sum(axis=0))
            if x.requires_grad or x._parents:
                dcols = g2 @ kmat.T
                dpad = _col2im(dcols, padded.shape[0], padded.shape[1], cin,
                               k, stride, oh, ow)
                if padding:
                    dpad = dpad[padding:padding + h, padding:padding + w]
                _accum(x, dpad)
        result._backward_fn = _backward
    return result


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution: [H,W,Cin] -> [(H-1)*stride+k, ..., Cout].

    The kernel layout is [k,k,Cout,Cin], chosen so that
    ``deconv2d(g, K, s)`` computes exactly the input-gradient of
    ``conv2d(x, K, s)`` when ``K`` has conv layout [k,k,Cin,Cout].
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3:
        raise ShapeError(f"deconv2d: input must be [H,W,C], got {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"deconv2d: kernel must be [k,k,Cout,Cin], got {kernel.shape}")
    k = kernel.shape[0]
    cout, cin = kernel.shape[2], kernel.shape[3]
    if x.shape[2] != cin:
        raise ShapeError(f"deconv2d: input channel dim {x.shape[2]} != kernel "
                         f"input channels {cin} (kernel dim 3)")
    if stride < 1:
        raise ValueError("deconv2d: stride must be >= 1")
    h, w = x.shape[0], x.shape[1]
    oh = (h - 1) * stride + k
    ow = (w - 1) * stride + k
    kmat = kernel.data.reshape(k * k * cout, cin)
    contrib = x.data.reshape(h * w, cin) @ kmat.T
    out = _col2im(contrib, oh, ow, cout, k, stride, h, w)
    result = _make_node(out, "deconv2d", (x, kernel))

    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            gcols = _im2col(g, k, stride)
            if x.requires_grad or x._parents:
                _accum(x, (gcols @ kmat).reshape(h, w, cin))
            if kernel.requires_grad or kernel._parents:
                dk = gcols.T @ x.data.reshape(h * w, cin)
                _accum(kernel, dk.reshape(kernel.shape))
        result._backward_fn = _backward
    return result


def maxpool2d(x: Tensor, k: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Channel-wise max over kxk windows; ties go to the first row-major index.

    ``ceil_mode`` pads the bottom/right edge (with -inf, never winning)
    so that partially covered windows produce an output row/column.
    """
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d: input must be [H,W,C], got {x.shape}")
    if k < 1 or stride < 1:
        raise ValueError("maxpool2d: need k >= 1 and stride >= 1")
    h, w, c = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than padded input {h}x{w}")
    if ceil_mode:
        oh = -(-(h - k) // stride) + 1
        ow = -(-(w - k) // stride) + 1
        ph = (oh - 1) * stride + k - h
        pw = (ow - 1) * stride + k - w
    else:
        oh = (h - k) // stride + 1
        ow = (w - k) // stride + 1
        ph = pw = 0
    if ph or pw:
        padded = np.pad(x.data, ((0, ph), (0, pw), (0, 0)), constant_values=-np.inf)
    else:
        padded = x.data
    win = _window_view(padded, k, stride).reshape(oh, ow, k * k, c)
    arg = win.argmax(axis=2)
    out = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
    result = _make_node(out, "maxpool2d", (x,))

    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if not (x.requires_grad or x._parents):
                return
            dy, dx_ = arg // k, arg % k
            rows = np.arange(oh)[:, None, None] * stride + dy
            cols = np.arange(ow)[None, :, None] * stride + dx_
            chans = np.broadcast_to(np.arange(c)[None, None, :], arg.shape)
            dpad = np.zeros_like(padded)
            np.add.at(dpad, (rows, cols, chans), g)
            _accum(x, dpad[:h, :w] if (ph or pw) else dpad)
        result._backward_fn = _backward
    return result


def global_avgpool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: [H,W,C] -> [C]."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"global_avgpool: input must be [H,W,C], got {x.shape}")
    h, w, _ = x.shape
    out = x.data.mean(axis=(0, 1))
    result = _make_node(out, "global_avgpool", (x,))

    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            _accum(x, np.broadcast_to(g / (h * w), x.shape).copy())
        result._backward_fn = _backward
    return result


@dataclass
class RunningStats:
    """Exponential running mean/variance for one batchnorm layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy())


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              mode: str = "train") -> Tensor:
    """Per-channel normalization over all non-channel axes.

    Train mode normalizes with the statistics of ``x`` and folds them
    into ``stats`` with decay 0.9 (one update per forward pass); eval
    mode normalizes with ``stats``. Biased variance is used throughout.

    ``online`` mode normalizes with the running statistics (treated as
    constants, pre-update) and then folds the tensor's own statistics
    in. The networks train with this mode: their per-image forward
    passes would otherwise normalize each image by itself, which both
    discards absolute color information and leaves the running averages
    unrepresentative of what training actually computed.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta must be ({c},), got "
                         f"{gamma.shape}/{beta.shape}")
    if mode not in ("train", "eval", "online"):
        raise ValueError(f"batchnorm: mode must be 'train', 'eval' or "
                         f"'online', got {mode!r}")
    axes = tuple(range(x.data.ndim - 1))
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean[...] = BN_STAT_DECAY * stats.mean + (1.0 - BN_STAT_DECAY) * mu
        stats.var[...] = BN_STAT_DECAY * stats.var + (1.0 - BN_STAT_DECAY) * var
    elif mode == "online":
        mu = stats.mean.astype(x.dtype).copy()
        var = stats.var.astype(x.dtype).copy()
        cur_mu = x.data.mean(axis=axes)
        cur_var = x.data.var(axis=axes)
        stats.mean[...] = BN_STAT_DECAY * stats.mean + (1.0 - BN_STAT_DECAY) * cur_mu
        stats.var[...] = BN_STAT_DECAY * stats.var + (1.0 - BN_STAT_DECAY) * cur_var
    else:
        mu = stats.mean.astype(x.dtype, copy=False)
        var = stats.var.astype(x.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data
    result = _make_node(out, "batchnorm", (x, gamma, beta))

    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if gamma.requires_grad or gamma._parents:
                _accum(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad or beta._parents:
                _accum(beta, g.sum(axis=axes))
            if x.requires_grad or x._parents:
                dxhat = g * gamma.data
                if mode == "train":
                    sum_dxhat = dxhat.sum(axis=axes)
                    sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes)
                    dx = (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n) * inv_std
                    _accum(x, dx)
                else:
                    # eval and online normalize by constants
                    _accum(x, dxhat * inv_std)
        result._backward_fn = _backward
    return result


# ---------------------------------------------------------------------------
# activations and shape ops


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    result = _make_node(out, "relu", (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            _accum(x, g * (x.data > 0.0))
        result._backward_fn = _backward
    return result


def _softmax_node(x: Tensor, axis: int, op: str) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    result = _make_node(p, op, (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            inner = (g * p).sum(axis=axis, keepdims=True)
            _accum(x, p * (g - inner))
        result._backward_fn = _backward
    return result


def channel_softmax(x: Tensor) -> Tensor:
    """Softmax along the channel axis of an [H,W,C] map."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"channel_softmax: input must be [H,W,C], got {x.shape}")
    return _softmax_node(x, axis=2, op="channel_softmax")


def vector_softmax(x: Tensor) -> Tensor:
    """Softmax of a [C] vector."""
    x = _as_tensor(x)
    if x.data.ndim != 1:
        raise ShapeError(f"vector_softmax: input must be [C], got {x.shape}")
    return _softmax_node(x, axis=0, op="vector_softmax")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two [H,W,*] maps along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels: inputs must be [H,W,C]")
    if a.shape[:2] != b.shape[:2]:
        raise ShapeError(f"concat_channels: spatial dims differ, {a.shape[:2]} vs "
                         f"{b.shape[:2]}")
    ca = a.shape[2]
    out = np.concatenate([a.data, b.data], axis=2)
    result = _make_node(out, "concat_channels", (a, b))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if a.requires_grad or a._parents:
                _accum(a, g[:, :, :ca])
            if b.requires_grad or b._parents:
                _accum(b, g[:, :, ca:])
        result._backward_fn = _backward
    return result


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Take channels [start, stop) of an [H,W,C] map."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("slice_channels: input must be [H,W,C]")
    if not (0 <= start < stop <= x.shape[2]):
        raise ShapeError(f"slice_channels: range [{start},{stop}) out of bounds "
                         f"for {x.shape[2]} channels")
    out = x.data[:, :, start:stop].copy()
    result = _make_node(out, "slice_channels", (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[:, :, start:stop] = g
            _accum(x, dx)
        result._backward_fn = _backward
    return result


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left [h, w] region; backward zero-pads."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError("crop_spatial: input must be [H,W,C]")
    if h > x.shape[0] or w > x.shape[1] or h < 1 or w < 1:
        raise ShapeError(f"crop_spatial: target {h}x{w} exceeds input "
                         f"{x.shape[0]}x{x.shape[1]}")
    out = x.data[:h, :w].copy()
    result = _make_node(out, "crop_spatial", (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            dx = np.zeros_like(x.data)
            dx[:h, :w] = g
            _accum(x, dx)
        result._backward_fn = _backward
    return result


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape).copy()
    result = _make_node(out, "reshape", (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            _accum(x, g.reshape(x.shape))
        result._backward_fn = _backward
    return result


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    result = _make_node(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            _accum(x, np.full_like(x.data, float(g)))
        result._backward_fn = _backward
    return result


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map [N] @ [N,M] + [M]."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.data.ndim != 1 or weights.data.ndim != 2:
        raise ShapeError("fully_connected: expects x [N] and weights [N,M]")
    n, m = weights.shape
    if x.shape != (n,):
        raise ShapeError(f"fully_connected: input length {x.shape[0]} != weight "
                         f"rows {n} (dim 0)")
    if bias.shape != (m,):
        raise ShapeError(f"fully_connected: bias length {bias.shape} != ({m},)")
    out = x.data @ weights.data + bias.data
    result = _make_node(out, "fully_connected", (x, weights, bias))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            if x.requires_grad or x._parents:
                _accum(x, weights.data @ g)
            if weights.requires_grad or weights._parents:
                _accum(weights, np.outer(x.data, g))
            if bias.requires_grad or bias._parents:
                _accum(bias, g)
        result._backward_fn = _backward
    return result


def cross_entropy(p: Tensor, label: int) -> Tensor:
    """Negative log-likelihood -log p[label] for a probability vector."""
    p = _as_tensor(p)
    if p.data.ndim != 1:
        raise ShapeError(f"cross_entropy: probabilities must be [C], got {p.shape}")
    c = p.shape[0]
    if not 0 <= label < c:
        raise IndexError(f"cross_entropy: label {label} out of range for {c} classes")
    total = float(p.data.sum())
    if abs(total - 1.0) > 1e-5 or (p.data < 0).any():
        raise ValueError(f"cross_entropy: input is not a probability vector "
                         f"(sum={total:.6g})")
    clamped = max(float(p.data[label]), LOG_CLAMP)
    result = _make_node(np.asarray(-np.log(clamped), dtype=p.dtype),
                        "cross_entropy", (p,))
    if result.requires_grad:
        def _backward(g: np.ndarray) -> None:
            dp = np.zeros_like(p.data)
            dp[label] = -float(g) / clamped
            _accum(p, dp)
        result._backward_fn = _backward
    return result


# ---------------------------------------------------------------------------
# optimization and gradient checking


@dataclass
class OptimizerState:
    """SGD-with-momentum state: v <- mu*v + g, w <- w - lr*v.

    Velocity buffers are created lazily, and only when momentum > 0.
    """

    learning_rate: float
    momentum: float = 0.0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> None:
    """Apply one SGD update in place to every named parameter."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"sgd_step: gradient shape {g.shape} != parameter "
                             f"shape {p.data.shape} for '{name}'")
        if state.momentum > 0.0:
            v = state.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                state.velocities[name] = v
            v *= state.momentum
            v += g
            p.data -= state.learning_rate * v
        else:
            p.data -= state.learning_rate * g


def finite_diff_check(fn: Callable[[], Tensor], wrt: Tensor,
                      eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the scalar loss from scratch on every call,
    closing over ``wrt``; the numeric probe perturbs ``wrt.data`` in
    place one coordinate at a time. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|). Meaningful in 64-bit mode.
    """
    out = fn()
    if out.size != 1:
        raise ValueError(f"finite_diff_check: loss must be scalar, got {out.shape}")
    wrt.zero_grad()
    out.backward()
    analytic = wrt.grad.copy()
    flat = wrt.data.reshape(-1)
    numeric = np.zeros_like(analytic).reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn().item()
        flat[i] = orig - eps
        lo = fn().item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(analytic.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
