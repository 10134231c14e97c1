"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Every
differentiable operation records a backward closure on a per-result tape
node; ``backward`` walks the recorded graph in reverse topological order.
The tape is rebuilt on every forward pass, which keeps variable-length
computations (ray-marching loops) simple.

Compute runs in float32 by default; gradient-check tests build everything
in float64 for headroom.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """N-d array with optional gradient tracking.

    ``data`` is always a numpy array; ``grad`` accumulates across backward
    passes until ``zero_grad``. Non-leaf tensors carry ``_parents`` and a
    ``_backward`` closure; leaves have neither.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection ------------------------------------------------

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- graph machinery ----------------------------------------------------

    def _record(self, parents: Sequence["Tensor"], backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Attach tape metadata to self if any parent needs gradients."""
        if _grad_enabled and any(p.requires_grad for p in parents):
            self.requires_grad = True
            self._parents = tuple(parents)
            self._backward = backward
        return self

    def backward(self, grad: Optional[np.ndarray] = None, free_graph: bool = True):
        """Backpropagate from this tensor to every reachable leaf.

        Without an explicit seed the tensor must be scalar. Gradients
        accumulate into ``.grad`` of requires_grad leaves. The recorded
        graph is cleared afterwards unless ``free_graph=False``.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        # Iterative topological sort (marching graphs can be deep).
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.accumulate_grad(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if free_graph:
            for node in topo:
                node._parents = ()
                node._backward = None

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# -- broadcasting helper ------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitive operations ------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data + b.data)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return out._record((a, b), bwd)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data - b.data)

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return out._record((a, b), bwd)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data * b.data)

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return out._record((a, b), bwd)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = Tensor(a.data / b.data)

    def bwd(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return out._record((a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if b.data.ndim != 2 or a.data.ndim < 1:
        raise ShapeError(f"matmul supports (..., n) @ (n, k); got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        if a.data.ndim == 1:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        else:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ((a, ga.reshape(a.data.shape)), (b, gb.reshape(b.data.shape)))

    return out._record((a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data**p)

    def bwd(g):
        return ((a, g * p * a.data ** (p - 1.0)),)

    return out._record((a,), bwd)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bwd(g):
        return ((a, g * out.data),)

    return out._record((a,), bwd)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))

    def bwd(g):
        return ((a, g / a.data),)

    return out._record((a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    return power(a, 0.5)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(np.asarray(g), a.data.shape).astype(a.data.dtype)),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g2, a.data.shape).astype(a.data.dtype)),)

    return out._record((a,), bwd)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        denom = a.data.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        denom = int(np.prod([a.data.shape[i] for i in ax]))

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(np.asarray(g) / denom, a.data.shape).astype(a.data.dtype)),)
        g2 = g
        if not keepdims:
            g2 = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g2 / denom, a.data.shape).astype(a.data.dtype)),)

    return out._record((a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return ((a, g.reshape(a.data.shape)),)

    return out._record((a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.transpose(axes))

    def bwd(g):
        inv = None if axes is None else np.argsort(axes)
        return ((a, g.transpose(inv)),)

    return out._record((a,), bwd)


def take(a: Tensor, idx) -> Tensor:
    """Basic and integer-array indexing with scatter-add backward."""
    a = as_tensor(a)
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return out._record((a,), bwd)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        results = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            results.append((p, g[tuple(sl)]))
        return tuple(results)

    return out._record(tuple(parts), bwd)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on each side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(a.data, width))

    def bwd(g):
        sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
        return ((a, g[sl]),)

    return out._record((a,), bwd)


def upsample2x(a: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling of the last two axes."""
    a = as_tensor(a)
    out = Tensor(a.data.repeat(2, axis=-2).repeat(2, axis=-1))

    def bwd(g):
        s = g.shape
        g4 = g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2))
        return ((a, g4.sum(axis=(-3, -1))),)

    return out._record((a,), bwd)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))

    def bwd(g):
        return ((a, g * (a.data > 0)),)

    return out._record((a,), bwd)


def leaky_relu(a: Tensor, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.where(a.data >= 0, a.data, a.data * a.data.dtype.type(alpha)))

    def bwd(g):
        return ((a, g * np.where(a.data >= 0, a.data.dtype.type(1), a.data.dtype.type(alpha))),)

    return out._record((a,), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stochastic softmax, computed with max subtraction for stability."""
    a = as_tensor(a)
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return ((a, s * (g - dot)),)

    return out._record((a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not (-a.data.ndim <= axis < a.data.ndim):
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.data.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    s = np.exp(out.data)

    def bwd(g):
        return ((a, g - s * g.sum(axis=axis, keepdims=True)),)

    return out._record((a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    gain = as_tensor(gain, like=x)
    shift = as_tensor(shift, like=x)
    n = x.data.shape[-1]
    if gain.data.shape != (n,) or shift.data.shape != (n,):
        raise ShapeError(
            f"layer_norm gain/shift must have shape ({n},), got {gain.data.shape} and {shift.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(xhat * gain.data + shift.data)

    def bwd(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gshift = g.sum(axis=red)
        return ((x, gx.astype(x.data.dtype)), (gain, ggain), (shift, gshift))

    return out._record((x, gain, shift), bwd)


def linear_forward(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``y = x @ weight.T + bias`` with ``weight`` stored (out, in)."""
    x = as_tensor(x)
    weight = as_tensor(weight, like=x)
    if x.data.shape[-1] != weight.data.shape[-1]:
        raise ShapeError(
            f"linear_forward: input shape {x.data.shape} incompatible with weight shape {weight.data.shape}"
        )
    y = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias, like=x)
        y = y + bias.data
    out = Tensor(y)

    def bwd(g):
        gx = g @ weight.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.data.shape[-1])
        results = [(x, gx.reshape(x.data.shape)), (weight, gw)]
        if bias is not None:
            results.append((bias, _unbroadcast(g, bias.data.shape)))
        return tuple(results)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return out._record(parents, bwd)


def backward(loss: Tensor) -> dict:
    """Run backprop from a scalar loss; return ``{leaf Tensor: gradient}``.

    Gradients also land on each leaf's ``.grad``. The tape is cleared.
    """
    leaves: dict[int, Tensor] = {}
    stack = [loss]
    seen = set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._backward is None and node.requires_grad:
            leaves[id(node)] = node
        stack.extend(node._parents)
    loss.backward()
    return {t: t.grad for t in leaves.values() if t.grad is not None}
