"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure that maps the output gradient to
input gradients.  Node ids come from a global counter, so a parent always has
a smaller id than its child and sorting reachable nodes by descending id is a
valid reverse topological order.

Broadcasting is deliberately limited to "same shape" or "one side has a single
element".  Channel-wise operations (bias add, per-channel gating) have their
own ops so gradient code stays easy to audit.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence]

_ids = itertools.count()
_DEBUG = False


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (debug mode only)."""


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "id", "op", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray + Tensor defer to Tensor.__radd__

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[Callable[[np.ndarray], tuple]] = None,
        op: str = "leaf",
    ):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node.id in nodes or not node.requires_grad:
                continue
            nodes[node.id] = node
            stack.extend(node._parents)

        pending = {self.id: grad}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = pending.pop(nid, None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in pending:
                    pending[parent.id] = pending[parent.id] + pg
                else:
                    pending[parent.id] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    rg = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=rg, _parents=parents if rg else (), _backward=backward if rg else None, op=op)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # operand was a single-element tensor broadcast over the other side
    return np.full(shape, grad.sum())


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _out_shape(a: Tensor, b: Tensor) -> tuple:
    if a.shape == b.shape:
        return a.shape
    if a.size == 1 and b.size == 1:
        return a.shape if a.data.ndim >= b.data.ndim else b.shape
    return b.shape if a.size == 1 else a.shape


def _binary_data(a: Tensor, b: Tensor, fn) -> np.ndarray:
    out = fn(a.data, b.data)
    shape = _out_shape(a, b)
    return out.reshape(shape) if out.shape != shape else out


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    out = _binary_data(a, b, np.add)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    out = _binary_data(a, b, np.subtract)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    out = _binary_data(a, b, np.multiply)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    """Elementwise quotient.  Division by zero yields inf/nan, never raises."""
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = _binary_data(a, b, np.divide)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _make(out, (a, b), backward, "div")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    if _DEBUG and np.any(x.data <= 0):
        raise DomainError("log of non-positive value")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / x.data,)

    return _make(out, (x,), backward, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def minimum(x, c: float) -> Tensor:
    """min(x, c) for a constant c; gradient is 0 where the constant wins."""
    x = as_tensor(x)
    mask = x.data < c
    return _make(np.where(mask, x.data, c), (x,), lambda g: (g * mask,), "min_const")


def maximum(x, c: float) -> Tensor:
    x = as_tensor(x)
    mask = x.data > c
    return _make(np.where(mask, x.data, c), (x,), lambda g: (g * mask,), "max_const")


def round_ste(x) -> Tensor:
    """Round half to even in the forward pass, identity in the backward pass."""
    x = as_tensor(x)
    return _make(np.rint(x.data), (x,), lambda g: (g,), "round_ste")


# ------------------------------------------------------------------ reductions

def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


# --------------------------------------------------------------------- shapes

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x) -> Tensor:
    """Collapse every axis but the first."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def add_channel(x, b) -> Tensor:
    """x + b with b (C,) broadcast along axis 1 of x (N, C, ...)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"add_channel: bias shape {b.shape} does not match channel axis of {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    out = x.data + b.data.reshape(view)
    axes = (0,) + tuple(range(2, x.data.ndim))
    return _make(out, (x, b), lambda g: (g, g.sum(axis=axes)), "add_channel")


def scale_channels(x, z, axis: int) -> Tensor:
    """Multiply x along ``axis`` by the per-channel vector z."""
    x, z = as_tensor(x), as_tensor(z)
    if z.shape != (x.shape[axis],):
        raise ShapeError(f"scale_channels: gate shape {z.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.data.ndim
    view[axis] = -1
    zb = z.data.reshape(view)
    other = tuple(i for i in range(x.data.ndim) if i != axis)

    def backward(g):
        return g * zb, (g * x.data).sum(axis=other)

    return _make(x.data * zb, (x, z), backward, "scale_channels")


# ----------------------------------------------------------------- linear ops

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x (N, Ci, H, W) with w (Co, Ci, Hf, Wf), zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = _pad(x.data, pad)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {xp.shape}")
    # windows: (N, Ci, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)

    def backward(g):
        gw = np.einsum("nohw,nchwij->ocij", g, win, optimize=True)
        gxp = np.zeros_like(xp)
        ho, wo = g.shape[2], g.shape[3]
        # scatter each kernel tap back onto the padded input
        contrib = np.einsum("nohw,ocij->ncijhw", g, w.data, optimize=True)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib[:, :, i, j]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return _make(out, (x, w), backward, "conv2d")


def max_pool2d(x, k: int = 2, stride: Optional[int] = None) -> Tensor:
    x = as_tensor(x)
    stride = stride or k
    n, c, h, wd = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        ii, jj = np.divmod(arg, k)
        nn_, cc, hh, ww = np.indices(arg.shape)
        np.add.at(gx, (nn_, cc, hh * stride + ii, ww * stride + jj), g)
        return (gx,)

    return _make(out, (x,), backward, "max_pool2d")


# -------------------------------------------------------------------- losses

def softmax_cross_entropy(logits, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (float(g) * p / n,)

    return _make(np.array(nll.mean()), (logits,), backward, "softmax_ce")


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
