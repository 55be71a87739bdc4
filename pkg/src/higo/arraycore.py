"""Dense float64 arrays with a reverse-mode gradient tape.

Every differentiable op appends one node to the active :class:`Tape`. Calling
:func:`backward` on a scalar walks the tape in reverse insertion order and
accumulates gradients into leaf arrays (parameters included).
"""
from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Array", "Parameter", "Tape", "TapeNode", "DetachedGraphError", "NonFiniteError",
    "tape", "no_grad", "grad_enabled", "current_tape", "backward",
    "matmul", "add", "mul", "exp", "log", "tanh", "sigmoid", "gelu", "softmax",
    "layer_norm", "conv_1x1", "depthwise_conv3x3", "spectral_conv2d", "concat",
    "sparse_rows", "getitem", "reshape", "transpose", "sum", "mean", "take_last", "clip_min",
    "linear", "as_array", "init_rng", "uniform_init",
]


class DetachedGraphError(RuntimeError):
    """Raised when backward is called on a value that is not on any tape."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class TapeNode:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op, out, inputs, backward_fn):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops; insertion order is topological."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self):
        return len(self.nodes)

    def record(self, op, out, inputs, backward_fn):
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(TapeNode(op, out, inputs, backward_fn))

    def clear(self):
        for node in self.nodes:
            node.out._tape = None
            node.out.tape_id = None
        self.nodes.clear()


_state = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = [Tape()]
        _state.grad = True
    return _state.tapes


def current_tape() -> Tape:
    return _stack()[-1]


def grad_enabled() -> bool:
    _stack()
    return _state.grad


@contextlib.contextmanager
def tape():
    """Run a block on a fresh tape; the tape is discarded on exit."""
    t = Tape()
    stack = _stack()
    stack.append(t)
    try:
        yield t
    finally:
        stack.pop()
        t.clear()


@contextlib.contextmanager
def no_grad():
    _stack()
    prev = _state.grad
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class Array:
    """Shape-tagged float64 tensor that may participate in a gradient tape."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Array":
        return Array(self.data)

    def __repr__(self):
        return f"Array(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_array(other)))

    def __rsub__(self, other):
        return add(as_array(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Array):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_array(other), self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


class Parameter(Array):
    """Named learnable leaf; ``grad`` always exists with the value's shape."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Array], backward_fn: Callable) -> Array:
    # a sum propagates nan/inf and costs one pass without a boolean temporary
    if not math.isfinite(float(np.sum(data))) and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Array(data)
    if grad_enabled() and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        current_tape().record(op, out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(root: Array) -> None:
    """Accumulate d(root)/d(leaf) into every grad-requiring leaf's ``grad``."""
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    t = root._tape
    if t is None or root.tape_id is None:
        raise DetachedGraphError("root is not on a tape (no grad-requiring inputs?)")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(t.nodes[: root.tape_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is t:
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
            elif inp.grad is None:
                inp.grad = np.array(gi, dtype=np.float64)
            else:
                inp.grad += gi


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Array) -> Array:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None))


def reciprocal(a: Array) -> Array:
    with np.errstate(divide="ignore", over="ignore"):
        out = 1.0 / a.data
    return _make("reciprocal", out, (a,), lambda g: (-g * out * out,))


def exp(a: Array) -> Array:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Array) -> Array:
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return _make("log", out, (a,), lambda g: (g / x,))


def clip_min(a: Array, lo: float) -> Array:
    """max(a, lo); gradient flows only where a > lo."""
    x = a.data
    keep = x > lo
    return _make("clip_min", np.where(keep, x, lo), (a,), lambda g: (g * keep,))


def tanh(a: Array) -> Array:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Array) -> Array:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Array) -> Array:
    """Tanh-approximated GeLU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    half = t + 1.0
    half *= 0.5                      # 0.5 (1 + tanh)
    out = x * half

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        d = t * t
        np.subtract(1.0, d, out=d)
        d *= x
        d *= 0.5 * _GELU_C
        d *= x2 * (3 * 0.044715) + 1.0
        d += half
        d *= g
        return (d,)

    return _make("gelu", out, (a,), bw)


# ---------------------------------------------------------------- shape ops

def reshape(a: Array, shape) -> Array:
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Array, axes=None) -> Array:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),))


def sum(a: Array, axis=None, keepdims=False) -> Array:  # noqa: A001
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Array, axis=None, keepdims=False) -> Array:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def concat(arrays: Sequence[Array], axis: int = -1) -> Array:
    arrays = [as_array(x) for x in arrays]
    sizes = [x.shape[axis] for x in arrays]
    cuts = np.cumsum(sizes)[:-1]
    return _make("concat", np.concatenate([x.data for x in arrays], axis=axis), tuple(arrays),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def getitem(a: Array, key) -> Array:
    """Basic (slice / integer) indexing with a scatter-back gradient."""
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        full[key] = g
        return (full,)

    return _make("getitem", a.data[key], (a,), bw)


def take_last(a: Array, index: np.ndarray) -> Array:
    """Pick one entry along the last axis: out[...] = a[..., index[...]]."""
    idx = np.asarray(index)[..., None]
    src = a.shape

    def bw(g):
        full = np.zeros(src)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make("take_last", np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), bw)


def sparse_rows(mat: sp.spmatrix, a: Array, axis: int = -2) -> Array:
    """Apply a constant sparse matrix along one axis of ``a`` (gather/scatter/pool)."""
    mat = sp.csr_matrix(mat)
    matT = sp.csr_matrix(mat.T)
    axis = axis % a.ndim

    def apply(m, x):
        moved = np.moveaxis(x, axis, 0)
        flat = moved.reshape(moved.shape[0], -1)
        res = np.asarray(m @ flat).reshape((m.shape[0],) + moved.shape[1:])
        return np.moveaxis(res, 0, axis)

    return _make("sparse_rows", apply(mat, a.data), (a,), lambda g: (apply(matT, g),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Array:
    """Matrix product with numpy broadcasting over leading (batch) dims."""
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), bw)


def linear(x: Array, w: Array, b: Array | None = None) -> Array:
    """x @ w + b over the last axis; leading axes are flattened for one BLAS call."""
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = y + b
    return reshape(y, lead + (w.shape[-1],))


def softmax(a: Array, axis: int = -1, mask: np.ndarray | None = None) -> Array:
    """Max-shifted softmax along ``axis``; masked-out entries get probability 0.

    A slice whose mask is all False yields zeros.
    """
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(mask, x.shape)
        x = np.where(mask, x, -np.inf)
        m = np.max(x, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        e = np.where(mask, np.exp(x - m), 0.0)
        s = np.sum(e, axis=axis, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)
    else:
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
        out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def layer_norm(a: Array, gain: Array, bias: Array, eps: float = 1e-5) -> Array:
    """Normalise over the last axis, then apply gain and bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = None
        if a.requires_grad:
            dxhat = g * gd
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                _unbroadcast(g * xhat, gd.shape) if gain.requires_grad else None,
                _unbroadcast(g, bias.shape) if bias.requires_grad else None)

    return _make("layer_norm", xhat * gd + bias.data, (a, gain, bias), bw)


# ---------------------------------------------------------------- grid convolutions

def conv_1x1(a: Array, w: Array, b: Array) -> Array:
    """Per-cell channel mixing on (..., H, W, D) input."""
    if a.shape[-1] != w.shape[0]:
        raise ValueError(f"conv_1x1 channel mismatch: input {a.shape}, kernel {w.shape}")
    return linear(a, w, b)


def depthwise_conv3x3(a: Array, w: Array) -> Array:
    """Zero-padded 'same' 3x3 correlation, one kernel per channel.

    ``a`` is (..., H, W, D); ``w`` is (3, 3, D).
    """
    x = a.data
    H, W = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    xp = np.pad(x, pad)
    wd = w.data
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            out += xp[..., i:i + H, j:j + W, :] * wd[i, j]

    def bw(g):
        gp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for i in range(3):
            for j in range(3):
                if a.requires_grad:
                    gp[..., i:i + H, j:j + W, :] += g * wd[i, j]
                if w.requires_grad:
                    gw[i, j] = (g * xp[..., i:i + H, j:j + W, :]).reshape(-1, x.shape[-1]).sum(0)
        return gp[..., 1:H + 1, 1:W + 1, :], gw

    return _make("depthwise_conv3x3", out, (a, w), bw)


def spectral_conv2d(a: Array, w: Array) -> Array:
    """Fourier-space channelwise filter on the lowest M x M spatial modes.

    ``a`` is (..., H, W, D); ``w`` is (M, M, D, 2) holding (real, imag) multipliers.
    Modes outside the retained block are zeroed; the real part of the inverse
    transform is returned.
    """
    x = a.data
    H, W = x.shape[-3], x.shape[-2]
    M = w.shape[0]
    if w.shape[1] != M or M > min(H, W):
        raise ValueError(f"spectral_conv2d: {M} modes exceed grid {H}x{W}")
    if w.shape[2] != x.shape[-1]:
        raise ValueError(f"spectral_conv2d channel mismatch: input {a.shape}, weights {w.shape}")
    axes = (-3, -2)
    wc = w.data[..., 0] + 1j * w.data[..., 1]
    F = np.fft.fft2(x, axes=axes)
    G = np.zeros_like(F)
    G[..., :M, :M, :] = F[..., :M, :M, :] * wc
    out = np.real(np.fft.ifft2(G, axes=axes))

    def bw(g):
        Fg = np.fft.fft2(g, axes=axes)
        gx = gw = None
        if a.requires_grad:
            Gg = np.zeros_like(Fg)
            Gg[..., :M, :M, :] = Fg[..., :M, :M, :] * np.conj(wc)
            gx = np.real(np.fft.ifft2(Gg, axes=axes))
        if w.requires_grad:
            # adjoint of ifft2 is fft2 / (H W)
            prod = np.conj(Fg[..., :M, :M, :] / (H * W)) * F[..., :M, :M, :]
            prod = prod.reshape((-1,) + prod.shape[-3:]).sum(0)
            gw = np.stack([prod.real, -prod.imag], axis=-1)
        return gx, gw

    return _make("spectral_conv2d", out, (a, w), bw)


# ---------------------------------------------------------------- initialisation

_rng = np.random.default_rng(0)


def init_rng(seed: int) -> np.random.Generator:
    """Reseed the single global initialisation RNG."""
    global _rng
    _rng = np.random.default_rng(seed)
    return _rng


def uniform_init(shape: Iterable[int], fan_in: int, name: str = "",
                 rng: np.random.Generator | None = None) -> Parameter:
    """Parameter drawn from U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    r = _rng if rng is None else rng
    bound = math.sqrt(6.0 / fan_in)
    return Parameter(r.uniform(-bound, bound, size=tuple(shape)), name=name)
