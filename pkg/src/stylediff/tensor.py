"""Dense tensors with reverse-mode gradients on top of numpy storage.

Every operation below builds a lightweight graph node holding its parents and
a backward closure. `GradientTape` replays those nodes once, newest first
(creation order is a valid topological order), accumulating gradients keyed by
tensor identity. Storage is float32 by default; construct parameters with
``dtype=np.float64`` for sharp finite-difference checks.

Convolution uses cross-correlation semantics (no kernel flip).
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from scipy.special import erf as _erf

from .errors import ShapeError

DEFAULT_DTYPE = np.float32

_seq_counter = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference/sampling paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fiu":
            raise TypeError(f"tensor data must be numeric, got dtype {arr.dtype}")
        if (
            arr.dtype.kind == "f"
            and dtype is None
            and not isinstance(data, (np.ndarray, np.generic))
        ):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._seq = next(_seq_counter)
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def assert_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor from op '{self.op}'")
        return self

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take_slice(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce `grad` back to `shape` after numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise binary -------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return _node(a.data + b, (a,), lambda g: (g,), "add")
    b = _coerce(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return _node(a.data - b, (a,), lambda g: (g,), "sub")
    b = _coerce(b, a.dtype)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return _node(a.data * b, (a,), lambda g: (g * b,), "mul")
    b = _coerce(b, a.dtype)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor) and np.isscalar(b):
        return _node(a.data / b, (a,), lambda g: (g / b,), "div")
    b = _coerce(b, a.dtype)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(a.data / b.data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p) -> Tensor:
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(a.data ** p, (a,), backward, "pow")


# elementwise unary --------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)
    return _node(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))
    return _node(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _node(a.data * s, (a,), backward, "silu")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)
    return _node(out_data, (a,), lambda g: (g * (1.0 - out_data * out_data),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def erf(a: Tensor) -> Tensor:
    two_over_sqrt_pi = 2.0 / np.sqrt(np.pi)

    def backward(g):
        return (g * two_over_sqrt_pi * np.exp(-a.data * a.data),)

    return _node(_erf(a.data), (a,), backward, "erf")


def layer_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """gamma * (x - mean) / std + beta over the last axis (fused primitive)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def group_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Per-group normalization of [B,C,H,W] with per-channel affine (fused)."""
    b, c, h, w = x.shape
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    centered = xg - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = (centered * inv).reshape(b, c, h, w)
    gamma_b = gamma.data.reshape(1, c, 1, 1)

    def backward(g):
        dxhat = (g * gamma_b).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xh).mean(axis=-1, keepdims=True)
        dx = (inv * (dxhat - m1 - xh * m2)).reshape(b, c, h, w)
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    out = xhat * gamma_b + beta.data.reshape(1, c, 1, 1)
    return _node(out, (x, gamma, beta), backward, "group_norm")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# reductions ---------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp / count, a.shape).copy(),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward, "mean")


# shape manipulation -------------------------------------------------------

def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _node(np.swapaxes(a.data, ax1, ax2), (a,), backward, "swapaxes")


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _node(np.transpose(a.data, axes), (a,), backward, "transpose")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _node(data, tuple(tensors), backward, "concat")


def take_slice(a: Tensor, idx) -> Tensor:
    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _node(a.data[idx], (a,), backward, "slice")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup `weight[ids]`; gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(
            f"id out of range for embedding table of {weight.shape[0]} rows"
        )

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _node(weight.data[ids], (weight,), backward, "embedding")


# matmul -------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = _coerce(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


# softmax ------------------------------------------------------------------

def softmax(a: Tensor, axis: int) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return _node(out_data, (a,), backward, "softmax")


# convolution and spatial ops ----------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    b, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    sb, sc, sh, sw = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(b, c, k, k, ho, wo),
        strides=(sb, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, c * k * k, ho * wo), ho, wo, (hp, wp)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [C,H,W] or [B,C,H,W] input with [Co,Ci,k,k] kernels."""
    single = x.ndim == 3
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ShapeError(f"conv2d expects [B,C,H,W] x [Co,Ci,k,k], got {x.shape} x {kernels.shape}")
    co, ci, k, k2 = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square with odd side, got {kernels.shape}")
    xin = x.data[None] if single else x.data
    if xin.shape[1] != ci:
        raise ShapeError(
            f"conv2d channel mismatch: input has {xin.shape[1]} channels, kernels expect {ci}"
        )
    b = xin.shape[0]
    cols, ho, wo, padded_hw = _im2col(xin, k, stride, padding)
    w2 = kernels.data.reshape(co, ci * k * k)
    out_data = (w2 @ cols).reshape(b, co, ho, wo)
    if single:
        out_data = out_data[0]

    def backward(g):
        gb = g[None] if single else g
        gflat = gb.reshape(b, co, ho * wo)
        gw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
        dcols = (w2.T @ gflat).reshape(b, ci, k, k, ho, wo)
        hp, wp = padded_hw
        dpad = np.zeros((b, ci, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                dpad[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += dcols[
                    :, :, ki, kj
                ]
        if padding:
            dpad = dpad[:, :, padding:-padding, padding:-padding]
        if single:
            dpad = dpad[0]
        return dpad, gw

    return _node(out_data, (x, kernels), backward, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k mean pooling; spatial dims must divide by k."""
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: spatial dims {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(*lead, ho, k, wo, k)
    out_data = blocks.mean(axis=(-3, -1))

    def backward(g):
        g_exp = np.broadcast_to(
            g[..., :, None, :, None] / (k * k), (*lead, ho, k, wo, k)
        )
        return (g_exp.reshape(x.shape).copy(),)

    return _node(out_data, (x,), backward, "avg_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the trailing two axes."""
    out_data = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def backward(g):
        *lead, h2, w2 = g.shape
        return (g.reshape(*lead, h2 // 2, 2, w2 // 2, 2).sum(axis=(-3, -1)),)

    return _node(out_data, (x,), backward, "upsample2x")


# reverse pass ---------------------------------------------------------------

class GradientTape:
    """Recorded operations reachable from a root, in application order.

    `run()` replays the records backward exactly once each, accumulating
    gradients into a map keyed by tensor identity.
    """

    def __init__(self, root: Tensor):
        self.root = root
        nodes = []
        seen = set()
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        self.operations = [t for t in nodes if t._backward is not None]
        self.grads: dict[int, np.ndarray] = {}
        self.visited = 0

    def run(self):
        self.grads[id(self.root)] = np.ones_like(self.root.data)
        for node in reversed(self.operations):
            g = self.grads.get(id(node))
            if g is None:
                continue
            self.visited += 1
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                acc = self.grads.get(id(parent))
                self.grads[id(parent)] = pg if acc is None else acc + pg
        return self

    def grad(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def gradient(loss: Tensor, params) -> list[Tensor]:
    """Gradients of a scalar loss for each parameter (zeros if unused)."""
    if loss.size != 1:
        raise ShapeError(f"gradient needs a scalar loss, got shape {loss.shape}")
    tape = GradientTape(loss).run()
    return [Tensor(tape.grad(p)) for p in params]
