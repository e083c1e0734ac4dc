"""Dense tensors with reverse-mode differentiation on a linear tape.

Arrays follow the [batch, channels, height, width] layout for images and
feature maps. Everything is backed by numpy; the graph machinery, the
convolution/pooling/normalization kernels and all backward passes live here.

Training runs in float32. For gradient checking, build parameters and inputs
in float64: every op preserves the dtype of its inputs.

A ``Tape`` records op outputs in construction order. ``backward`` walks the
tape once, in reverse, so the traversal order is deterministic and gradients
are bitwise reproducible across runs.
"""

from __future__ import annotations

import threading
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents are inconsistent with the requested operation."""


class StatisticsError(ValueError):
    """Too few elements to form batch statistics."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


class NumericsError(RuntimeError):
    """A non-finite value appeared where the pipeline requires finite ones."""


# ---------------------------------------------------------------------------
# Tape and tensors

_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of one forward pass; graphs are confined to one thread."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(getattr(_state, "tape", None))
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = _state.stack.pop()
        return False


class Tensor:
    """n-d array with an optional gradient slot and a place in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=False)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _record(out_data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    tape = _active_tape()
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
        tape.nodes.append(out)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(node) through the tape.

    Visits nodes exactly once, in reverse construction order. Gradients
    accumulate additively, so a tensor used several times receives the sum
    of its uses. A parameter that does not influence the loss keeps
    ``grad is None`` (read as zero).
    """
    if loss.data.size != 1:
        raise ContractError("backward requires a scalar loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and shape ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: _accumulate(a, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def mul_const(a: Tensor, const) -> Tensor:
    """Multiply by a non-differentiable constant array (e.g. a step mask)."""
    const = np.asarray(const, dtype=a.data.dtype)
    out = a.data * const

    def bwd(g):
        _accumulate(a, _unbroadcast(g * const, a.data.shape))

    return _record(out, (a,), bwd)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _record(out, (a,), bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _record(out, tuple(tensors), bwd)


def narrow(a: Tensor, axis: int, start: int, size: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + size)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _record(out, (a,), bwd)


def pick(a: Tensor, indices) -> Tensor:
    """Select a[i, indices[i]] for each row of a 2-d tensor."""
    if a.data.ndim != 2:
        raise DimensionError("pick expects a 2-d tensor")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        _accumulate(a, full)

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Activations and normalizing maps

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def bwd(g):
        _accumulate(a, g * (a.data > 0))

    return _record(out, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        _accumulate(a, g * (1 - out * out))

    return _record(out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _accumulate(a, g * out * (1 - out))

    return _record(out, (a,), bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind: {kind!r}") from None
    return fn(a)


def softmax(a: Tensor, axis: int) -> Tensor:
    # max-subtraction keeps exp in range for any finite scores
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - dot) * out)

    return _record(out, (a,), bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        soft = np.exp(out)
        _accumulate(a, g - soft * g.sum(axis=axis, keepdims=True))

    return _record(out, (a,), bwd)


# ---------------------------------------------------------------------------
# Linear algebra

def linear(x: Tensor, w: Tensor) -> Tensor:
    """Apply w[E, D] over the trailing dimension of x[..., D]; no bias."""
    if x.data.shape[-1] != w.data.shape[1]:
        raise DimensionError(
            f"linear: trailing extent {x.data.shape[-1]} != weight columns {w.data.shape[1]}")
    out = x.data @ w.data.T

    def bwd(g):
        g2 = g.reshape(-1, w.data.shape[0])
        x2 = x.data.reshape(-1, w.data.shape[1])
        _accumulate(w, g2.T @ x2)
        _accumulate(x, (g2 @ w.data).reshape(x.data.shape))

    return _record(out, (x, w), bwd)


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
    return cols.reshape(b, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate x[N,C,H,W] with kernel[K,C,kh,kw]."""
    if stride < 1 or pad < 0:
        raise DimensionError("conv2d: stride must be >= 1 and pad >= 0")
    n, c, h, w = x.data.shape
    k, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ck}")
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise DimensionError("conv2d: output extent is not an integer")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.reshape(n, c, h * w)
    else:
        cols = _im2col(_pad_nchw(x.data, pad), kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(k, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, k, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, k, ho * wo)
        _accumulate(kernel, np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.data.shape))
        if not x.requires_grad:
            return
        dcols = np.matmul(w2.T, g2)  # [n, c*kh*kw, ho*wo]
        if kh == 1 and kw == 1 and stride == 1 and pad == 0:
            _accumulate(x, dcols.reshape(x.data.shape))
            return
        dcols = dcols.reshape(n, c, kh, kw, ho, wo)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += dcols[:, :, i, j]
        _accumulate(x, dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    return _record(out, (x, kernel), bwd)


def maxpool2x2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling; gradient goes to the first max in row-major order."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2: extents {h}x{w} must be even")
    windows = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = windows.reshape(n, c, h // 2, w // 2, 4)
    argmax = flat.argmax(axis=-1)  # first max wins ties (row-major within window)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]

    def bwd(g):
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, argmax[..., None], g[..., None], axis=-1)
        dx = dflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.data.shape)
        _accumulate(x, dx)

    return _record(out, (x,), bwd)


class RunningStats:
    """Per-channel running mean/variance buffers for batch normalization."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
               mode: str, eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Normalize x[N,C,H,W] per channel over (N,H,W).

    Train mode uses batch statistics and folds them into the running buffers
    with ``running = momentum * running + (1 - momentum) * batch``. Eval mode
    normalizes with the running buffers.
    """
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm: gamma/beta must have one entry per channel")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    dt = x.data.dtype
    eps = dt.type(eps)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise StatisticsError("batch_norm: batch statistics need at least 2 values per channel")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean[:] = momentum * stats.mean + (1 - momentum) * mean
        stats.var[:] = momentum * stats.var + (1 - momentum) * var
    else:
        mean = stats.mean.astype(dt, copy=False)
        var = stats.var.astype(dt, copy=False)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def bwd(g):
        _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        _accumulate(beta, g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        gx = g * gamma.data[:, None, None]
        if mode == "eval":
            _accumulate(x, gx * inv_std[:, None, None])
            return
        m = n * h * w
        mean_g = gx.mean(axis=(0, 2, 3))
        mean_gx_xhat = (gx * xhat).mean(axis=(0, 2, 3))
        dx = (gx - mean_g[:, None, None] - xhat * mean_gx_xhat[:, None, None]) * inv_std[:, None, None]
        _accumulate(x, dx)

    return _record(out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# Bilinear resizing

@lru_cache(maxsize=None)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic interpolation matrix [n_out, n_in], half-pixel centers.

    Output index i samples input coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to the borders. Identity-size calls produce the identity matrix
    exactly, and rows always sum to 1, so constants are preserved.
    """
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_plane(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Plain-array bilinear resize of a 2-d image (same convention as the op)."""
    ah = _resize_matrix(img.shape[0], out_h).astype(img.dtype)
    aw = _resize_matrix(img.shape[1], out_w).astype(img.dtype)
    return ah @ img @ aw.T


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize x[N,C,H,W] to [N,C,out_h,out_w] with bilinear interpolation."""
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize: target extents must be >= 1")
    n, c, h, w = x.data.shape
    dt = x.data.dtype
    ah = _resize_matrix(h, out_h).astype(dt)
    aw = _resize_matrix(w, out_w).astype(dt)
    out = np.einsum("oh,nchw,pw->ncop", ah, x.data, aw, optimize=True)

    def bwd(g):
        _accumulate(x, np.einsum("oh,ncop,pw->nchw", ah, g, aw, optimize=True))

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# LSTM cell

class LstmParams:
    """Gate matrices of one LSTM cell, each applied to [input; hidden]."""

    GATES = ("input", "forget", "cell", "output")

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32, init_scale: Optional[float] = None):
        self.input_size = input_size
        self.hidden_size = hidden_size
        d = input_size + hidden_size
        s = init_scale if init_scale is not None else 1.0 / np.sqrt(d)
        self.weights = {
            gate: parameter(rng.uniform(-s, s, size=(hidden_size, d)).astype(dtype))
            for gate in self.GATES
        }

    def named(self, prefix: str):
        for gate in self.GATES:
            yield f"{prefix}/{gate}", self.weights[gate]


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LstmParams):
    """One LSTM step; returns (h, c). Gates act on the concatenated [x; h]."""
    if x.data.shape[-1] != params.input_size or h_prev.data.shape[-1] != params.hidden_size:
        raise DimensionError("lstm_step: state extents do not match parameters")
    xh = concat([x, h_prev], axis=1)
    i = sigmoid(linear(xh, params.weights["input"]))
    f = sigmoid(linear(xh, params.weights["forget"]))
    g = tanh(linear(xh, params.weights["cell"]))
    o = sigmoid(linear(xh, params.weights["output"]))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def assert_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {what}")
