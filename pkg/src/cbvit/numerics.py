"""Dense arrays with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and, when built by one of the operations
below, remembers its parents and a closure that pushes the incoming gradient
back to them.  :func:`backward` walks the recorded graph in reverse
topological order.  Every operation checks that its output is finite;
a NaN or Inf raises :class:`NonFiniteError` instead of propagating.

:func:`finite_diff` is the independent oracle used to test all of it.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

__all__ = [
    "Tensor",
    "InvalidInputError",
    "NonFiniteError",
    "as_tensor",
    "backward",
    "finite_diff",
    "softmax_rows",
    "log_softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "concat",
    "relative_error",
]


class InvalidInputError(ValueError):
    """Raised when an operation receives NaN/Inf or otherwise malformed input."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation would produce NaN or Inf from finite input."""


def _float_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op: str = ""):
        self.data = _float_array(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward = _backward
        self._op = _op

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __rtruediv__(self, other):
        return mul(as_tensor(other, self.dtype), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other, self.dtype), self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method-style ops ------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims: bool = False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else _float_array(x)
    return Tensor(arr)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    track = any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, _op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{op}: input contains NaN or Inf")


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _bw, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def _bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _bw, "mul")


def reciprocal(a: Tensor) -> Tensor:
    if np.any(a.data == 0):
        raise NonFiniteError("division by zero")
    out = 1.0 / a.data
    return _result(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def _bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(out, (a,), _bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF (no tanh shortcut).

    Accepts a Tensor (differentiable) or anything array-like (returns ndarray).
    """
    if not isinstance(x, Tensor):
        arr = _float_array(x)
        _require_finite(arr, "gelu")
        return arr * ndtr(arr)
    _require_finite(x.data, "gelu")
    cdf = ndtr(x.data)
    out = x.data * cdf

    def _bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), _bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _result(out, (a,), _bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise InvalidInputError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _result(out, (a,), _bw, "mean")


def tmax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    # Ties share the gradient equally.
    axes = _norm_axes(axis, a.ndim)
    full = a.data.max(axis=axes, keepdims=True)
    out = full if keepdims else np.squeeze(full, axis=axes)

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        mask = (a.data == full).astype(a.dtype)
        mask /= mask.sum(axis=axes, keepdims=True)
        return (mask * g,)

    return _result(out, (a,), _bw, "max")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _result(out, (a,), lambda g: (g.transpose(inverse),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape)
    return _result(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def _bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(out, (a,), _bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tensors, _bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise InvalidInputError("matmul expects operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    with np.errstate(invalid="ignore", over="ignore"):  # _result reports non-finite output
        out = a.data @ b.data

    def _bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), _bw, "matmul")


# ---------------------------------------------------------------------------
# fused neural-network ops
# ---------------------------------------------------------------------------


def softmax_rows(scores, lam: float = 1.0):
    """Row-wise softmax of ``lam * scores`` along the last axis.

    Stabilized by subtracting the row maximum.  Tensor in, Tensor out
    (differentiable); array in, array out.
    """
    if not lam > 0:
        raise InvalidInputError(f"softmax scale must be positive, got {lam}")
    is_tensor = isinstance(scores, Tensor)
    s = as_tensor(scores)
    _require_finite(s.data, "softmax_rows")
    z = lam * s.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    if not is_tensor:
        return out

    def _bw(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (lam * out * (g - inner),)

    return _result(out, (s,), _bw, "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    _require_finite(logits.data, "log_softmax")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def _bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (logits,), _bw, "log_softmax")


def cross_entropy(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy over the batch; ``labels`` are class indices."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InvalidInputError(f"cross_entropy expects (B, K) logits and (B,) labels, got {logits.shape}, {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidInputError("label index out of range")
    target = np.full(logits.shape, label_smoothing / k, dtype=logits.dtype)
    target[np.arange(len(labels)), labels] += 1.0 - label_smoothing
    logp = log_softmax(logits)
    return -(logp * target).sum() / len(labels)


def layer_norm(x, gamma, beta, eps: float = 1e-6):
    """``gamma * (x - mean) / sqrt(var + eps) + beta`` over the last axis.

    ``eps`` may be 0 for exact hand examples; a constant input then divides
    zero by zero and raises.
    """
    if eps < 0:
        raise InvalidInputError("layer_norm eps must be non-negative")
    is_tensor = any(isinstance(t, Tensor) for t in (x, gamma, beta))
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise InvalidInputError(f"layer_norm: gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    _require_finite(x.data, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
    out = gamma.data * xhat + beta.data
    if not is_tensor:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("layer_norm produced non-finite values")
        return out

    def _bw(g):
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), _bw, "layer_norm")


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidInputError("loss is detached from every requires_grad leaf")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def finite_diff(f: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta``."""
    theta = np.array(theta, dtype=np.float64)
    flat = theta.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(f(theta))
        flat[i] = orig - eps
        down = float(f(theta))
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * eps)
    return grad.reshape(theta.shape)


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)`` elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)

