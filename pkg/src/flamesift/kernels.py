"""Numerical layer kernels: forward maps and their gradients.

Spatial tensors are numpy arrays shaped ``(maps, height, width)``; every
kernel also accepts a batched ``(batch, maps, height, width)`` array and
vectorizes over the leading axis.  All arithmetic accumulates in float64.

Backward kernels differentiate the *linear* part of each layer.  For a
ReLU-activated layer, multiply the incoming gradient by
:func:`relu_grad` of the cached pre-activation before calling the
backward kernel; the network module does exactly that.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("relu", "identity")


class _ScratchPool:
    """Recycled float64 scratch buffers for transient patch matrices.

    Freshly mmap'd pages make large short-lived allocations dominate the
    conv kernels' runtime; recycling flat buffers by element count avoids
    that.  Buffers handed out via :meth:`take` must stay private to the
    caller until :meth:`give`; results that escape a kernel are always
    freshly allocated.  Lock-guarded, so kernels stay safe to call
    concurrently.
    """

    def __init__(self, capacity_bytes=1_500_000_000):
        self._lock = threading.Lock()
        self._free = {}
        self._cached_bytes = 0
        self._capacity = capacity_bytes

    def take(self, shape):
        size = int(np.prod(shape))
        with self._lock:
            stack = self._free.get(size)
            if stack:
                flat = stack.pop()
                self._cached_bytes -= flat.nbytes
                return flat.reshape(shape)
        return np.empty(size, dtype=np.float64).reshape(shape)

    def give(self, arr):
        if not arr.flags.c_contiguous or arr.dtype != np.float64:
            return
        flat = arr.reshape(-1)
        with self._lock:
            if self._cached_bytes + flat.nbytes <= self._capacity:
                self._free.setdefault(flat.size, []).append(flat)
                self._cached_bytes += flat.nbytes


_POOL = _ScratchPool()


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0.0)


def relu_grad(x):
    """Derivative of relu; defined as 0 at x == 0."""
    return (np.asarray(x) > 0).astype(np.float64)


def _activate(x, activation):
    if activation == "relu":
        return relu(x)
    if activation == "identity":
        return x
    raise ValueError(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")


def _as_batch(x, name="input"):
    """Promote (maps, h, w) to (1, maps, h, w); return (array, was_single)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(
        f"{name} must be (maps, h, w) or (batch, maps, h, w), got shape {x.shape}"
    )


@dataclass
class ConvKernel:
    """Square filter bank: ``weights[o, i, r, c]`` plus one bias per output map."""

    out_maps: int
    in_maps: int
    size: int
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError(f"filter size must be >= 1, got {self.size}")
        w = np.asarray(self.weights, dtype=np.float64)
        expected = self.out_maps * self.in_maps * self.size * self.size
        if w.size != expected:
            raise ShapeError(
                f"kernel weights have {w.size} values, expected "
                f"{self.out_maps}x{self.in_maps}x{self.size}x{self.size} = {expected}"
            )
        self.weights = w.reshape(self.out_maps, self.in_maps, self.size, self.size)
        b = np.asarray(self.bias, dtype=np.float64)
        if b.size != self.out_maps:
            raise ShapeError(f"bias has {b.size} values, expected {self.out_maps}")
        self.bias = b.reshape(self.out_maps)


@dataclass
class PoolSpec:
    """Non-overlapping square pooling window; stride equals size."""

    size: int

    def __post_init__(self):
        if self.size < 1:
            raise ShapeError(f"pool size must be >= 1, got {self.size}")


@dataclass
class ArgmaxMap:
    """Row-major offset of the selected maximum inside each pooling window.

    ``offsets`` holds flat offsets in ``[0, size*size)`` with the same
    leading shape as the pooled output; ``rows``/``cols`` split them into
    (row, col) window coordinates.
    """

    size: int
    input_shape: tuple
    offsets: np.ndarray

    @property
    def rows(self):
        return self.offsets // self.size

    @property
    def cols(self):
        return self.offsets % self.size


def _pool_size(spec):
    if isinstance(spec, PoolSpec):
        return spec.size
    p = int(spec)
    if p < 1:
        raise ShapeError(f"pool size must be >= 1, got {p}")
    return p


def _im2col(x, c):
    """Patch matrix of valid c x c windows: (n, maps*c*c, oh*ow).

    Built with c*c large contiguous slice copies, which is far cheaper on
    this access pattern than a strided gather.  The returned buffer comes
    from the scratch pool; give it back when done.
    """
    n, maps, h, w = x.shape
    oh, ow = h - c + 1, w - c + 1
    cols = _POOL.take((n, maps, c, c, oh, ow))
    for a in range(c):
        for b in range(c):
            cols[:, :, a, b] = x[:, :, a : a + oh, b : b + ow]
    return cols.reshape(n, maps * c * c, oh * ow), oh, ow


def _corr_valid(x, wmat, out_maps):
    """Valid cross-correlation of a batch with a (out_maps, maps*c*c) matrix."""
    c = int(round(math.sqrt(wmat.shape[1] // x.shape[1])))
    cols, oh, ow = _im2col(x, c)
    out = np.matmul(wmat, cols)
    _POOL.give(cols)
    return out.reshape(x.shape[0], out_maps, oh, ow)


def _pad_spatial(x, pad):
    """Zero-pad the two trailing axes using a pooled buffer."""
    n, m, h, w = x.shape
    out = _POOL.take((n, m, h + 2 * pad, w + 2 * pad))
    out[:, :, :pad, :] = 0.0
    out[:, :, pad + h :, :] = 0.0
    out[:, :, pad : pad + h, :pad] = 0.0
    out[:, :, pad : pad + h, pad + w :] = 0.0
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def conv_forward(input, kernel, activation="relu"):
    """Valid-mode cross-correlation (unflipped kernels) plus bias and activation.

    Output spatial dims shrink by ``size - 1``.
    """
    x, single = _as_batch(input)
    n, maps, h, w = x.shape
    if maps != kernel.in_maps:
        raise ShapeError(
            f"input has {maps} maps but kernel expects {kernel.in_maps} "
            f"(input shape {x.shape[1:]}, kernel weights {kernel.weights.shape})"
        )
    c = kernel.size
    if h < c or w < c:
        raise ShapeError(f"input {h}x{w} is smaller than the {c}x{c} filter")
    wmat = kernel.weights.reshape(kernel.out_maps, -1)
    out = _corr_valid(x, wmat, kernel.out_maps)
    out += kernel.bias[None, :, None, None]
    out = _activate(out, activation)
    return out[0] if single else out


def conv_backward(input, kernel, grad_out):
    """Gradients of the linear valid correlation.

    Returns ``(grad_input, grad_weights, grad_bias)``; ``grad_bias[k]`` is
    the sum of ``grad_out`` over map k.
    """
    x, single = _as_batch(input)
    g, _ = _as_batch(grad_out, "grad_out")
    n, maps, h, w = x.shape
    c = kernel.size
    oh, ow = h - c + 1, w - c + 1
    if g.shape != (n, kernel.out_maps, oh, ow):
        raise ShapeError(
            f"grad_out shape {g.shape} does not match forward output "
            f"({n}, {kernel.out_maps}, {oh}, {ow})"
        )

    cols, _, _ = _im2col(x, c)
    gmat = g.reshape(n, kernel.out_maps, oh * ow)
    # grad_w[o, k] = sum over batch and positions of g * patches
    grad_w = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_w = grad_w.reshape(kernel.weights.shape)
    _POOL.give(cols)
    grad_b = g.sum(axis=(0, 2, 3))

    # grad wrt input: full correlation of grad_out with spatially flipped
    # kernels, in/out map axes swapped.
    flipped = kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    gpad = _pad_spatial(g, c - 1)
    grad_x = _corr_valid(gpad, np.ascontiguousarray(flipped).reshape(maps, -1), maps)
    _POOL.give(gpad)

    if single:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


def maxpool_forward(input, spec):
    """Non-overlapping max pooling; ties resolve to the first maximum in
    row-major window order.  Spatial dims must divide by the pool size."""
    x, single = _as_batch(input)
    p = _pool_size(spec)
    n, maps, h, w = x.shape
    if h % p or w % p:
        raise ShapeError(f"spatial dims {h}x{w} are not divisible by pool size {p}")
    oh, ow = h // p, w // p
    blocks = _POOL.take((n, maps, oh, ow, p * p))
    view = blocks.reshape(n, maps, oh, ow, p, p)
    view[...] = x.reshape(n, maps, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5)
    offsets = blocks.argmax(axis=-1)
    values = np.take_along_axis(blocks, offsets[..., None], axis=-1)[..., 0]
    _POOL.give(blocks)
    if single:
        return values[0], ArgmaxMap(p, x.shape[1:], offsets[0])
    return values, ArgmaxMap(p, x.shape, offsets)


def maxpool_backward(grad_out, argmax, input_shape=None):
    """Route each pooled-cell gradient to its recorded argmax position."""
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != argmax.offsets.shape:
        raise ShapeError(
            f"grad_out shape {g.shape} does not match pooled shape {argmax.offsets.shape}"
        )
    shape = tuple(argmax.input_shape if input_shape is None else input_shape)
    p = argmax.size
    blocks = _POOL.take(g.shape + (p * p,))
    blocks[...] = 0.0
    np.put_along_axis(blocks, argmax.offsets[..., None], g[..., None], axis=-1)
    full = blocks.reshape(g.shape + (p, p))
    out = np.moveaxis(full, -2, -3).reshape(
        g.shape[:-2] + (g.shape[-2] * p, g.shape[-1] * p)
    )
    if np.shares_memory(out, blocks):  # p = 1: the reshape stayed a view
        out = out.copy()
    _POOL.give(blocks)
    if out.shape != shape:
        raise ShapeError(f"reconstructed shape {out.shape} does not match {shape}")
    return out


def unpool(input, factor):
    """Nearest-neighbor upscale: replicate each cell into a factor x factor block."""
    f = int(factor)
    if f < 1:
        raise ShapeError(f"unpool factor must be >= 1, got {f}")
    x = np.asarray(input, dtype=np.float64)
    return x.repeat(f, axis=-2).repeat(f, axis=-1)


def unpool_backward(grad_out, factor):
    """Sum each factor x factor block of grad_out back onto its source cell."""
    f = int(factor)
    if f < 1:
        raise ShapeError(f"unpool factor must be >= 1, got {f}")
    g = np.asarray(grad_out, dtype=np.float64)
    h, w = g.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"grad_out dims {h}x{w} are not divisible by factor {f}")
    shape = g.shape[:-2] + (h // f, f, w // f, f)
    return g.reshape(shape).sum(axis=(-3, -1))


def deconv_forward(input, kernel, activation="identity"):
    """Full-mode correlation: zero-pad by size-1 on all sides, then valid conv.

    Output spatial dims grow by ``size - 1``.
    """
    x, single = _as_batch(input)
    pad = kernel.size - 1
    padded = _pad_spatial(x, pad)
    out = conv_forward(padded, kernel, activation)
    _POOL.give(padded)
    return out[0] if single else out


def deconv_backward(input, kernel, grad_out):
    """Gradients of the linear full correlation (pad-then-valid form)."""
    x, single = _as_batch(input)
    g, _ = _as_batch(grad_out, "grad_out")
    pad = kernel.size - 1
    h, w = x.shape[-2:]
    padded = _pad_spatial(x, pad)
    grad_padded, grad_w, grad_b = conv_backward(padded, kernel, g)
    _POOL.give(padded)
    grad_x = np.ascontiguousarray(grad_padded[..., pad : pad + h, pad : pad + w])
    if single:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


def dense_forward(input, weights, bias, activation="relu"):
    """activation(W @ x + b) for flat vectors or (batch, features) stacks."""
    x = np.asarray(input, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    if x.ndim not in (1, 2):
        raise ShapeError(f"dense input must be 1-D or 2-D, got shape {x.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(
            f"input length {x.shape[-1]} does not match weight columns {W.shape[1]}"
        )
    return _activate(x @ W.T + b, activation)


def dense_backward(input, weights, grad_out):
    """Gradients of the linear dense map: (grad_input, grad_weights, grad_bias)."""
    x = np.asarray(input, dtype=np.float64)
    W = np.asarray(weights, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape[:-1] != x.shape[:-1] or g.shape[-1] != W.shape[0]:
        raise ShapeError(
            f"grad_out shape {g.shape} does not match output of {W.shape[0]} units "
            f"for input shape {x.shape}"
        )
    if x.ndim == 1:
        return g @ W, np.outer(g, x), g.copy()
    return g @ W, g.T @ x, g.sum(axis=0)
