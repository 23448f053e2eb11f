"""
Dense tensors with tape-based reverse-mode differentiation.

This module provides:
- Tensor: numpy-backed array that records the ops producing it
- Tensor.backward: gradient accumulation into leaf tensors
- The differentiable op set used by the network (arithmetic, matmul,
  reductions, indexing, softmax, layer norm, GELU, cross-entropy, dropout
  and bilinear grid sampling)
- Per-thread switches: no_grad() and eval_mode()

Every op builds its output with `_make`, passing a closure that maps the
output gradient to one gradient per parent (None when a parent needs none).
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from vecmap.utils.errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64
GELU_C = float(np.sqrt(2.0 / np.pi))


class _ModeState(threading.local):
    """Per-thread autodiff switches; every thread starts recording in training mode."""

    grad_enabled: bool = True
    training: bool = True


_mode = _ModeState()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (current thread only)."""
    previous = _mode.grad_enabled
    _mode.grad_enabled = False
    try:
        yield
    finally:
        _mode.grad_enabled = previous


def is_grad_enabled() -> bool:
    return _mode.grad_enabled


def set_training(flag: bool) -> None:
    """Set the current thread's training flag (dropout is identity when False)."""
    _mode.training = bool(flag)


def is_training() -> bool:
    return _mode.training


@contextmanager
def eval_mode() -> Iterator[None]:
    """Run the block with dropout disabled."""
    previous = _mode.training
    set_training(False)
    try:
        yield
    finally:
        set_training(previous)


class Tensor:
    """N-dimensional array with gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype=None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph --------------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        Accumulate d(self)/d(leaf) into every reachable leaf's `.grad`.

        Args:
            grad: Seed gradient; required unless self is a scalar
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators ----------------------------------------------------------

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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method shortcuts ---------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _topological_order(root: Tensor) -> List[Tensor]:
    """Parents before children, restricted to nodes that require grad."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def as_tensor(x: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _mode.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from e


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    return _make(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    return _make(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def gelu(a: ArrayLike) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(out, (a,), backward)


def absolute(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "maximum")
    take_a = a.data >= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; ties send the gradient to `a`."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "minimum")
    take_a = a.data <= b.data
    return _make(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def where(cond: np.ndarray, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Select from a where cond holds, else from b (cond is a constant mask)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _make(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * cond, a.shape), _unbroadcast(g * ~cond, b.shape)),
    )


def clip(a: ArrayLike, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product over the last two axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), backward)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swapaxes(a: ArrayLike, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of `table` selected by integer ids of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding ids outside [0, {table.shape[0]})")
    return getitem(table, ids)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from e

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims),),
    )


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return _make(
        out,
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,),
    )


def _arg_reduce(a: Tensor, axis: int, pick) -> Tensor:
    idx = np.expand_dims(pick(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _make(out, (a,), backward)


def amax(a: ArrayLike, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal entry."""
    return _arg_reduce(as_tensor(a), axis, np.argmax)


def amin(a: ArrayLike, axis: int) -> Tensor:
    """Min along one axis; the gradient goes to the first minimal entry."""
    return _arg_reduce(as_tensor(a), axis, np.argmin)


# ---------------------------------------------------------------------------
# Normalization, attention helpers and losses
# ---------------------------------------------------------------------------


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (a,), backward)


def layer_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: params {gamma.shape} do not match features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv_std * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


def dropout(x: ArrayLike, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity in eval mode, for p == 0 or without an RNG."""
    x = as_tensor(x)
    if not _mode.training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, keep)


def gather_last(a: ArrayLike, index: np.ndarray) -> Tensor:
    """Pick a[..., index[...]] along the last axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: index {index.shape} vs leading dims {a.shape[:-1]}")
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _make(out, (a,), backward)


def cross_entropy(
    logits: ArrayLike,
    targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
    reduction: str = "mean",
) -> Tensor:
    """
    Negative log-likelihood of integer targets under softmax(logits).

    Args:
        logits: (..., C) scores
        targets: (...) integer class ids in [0, C)
        weights: Optional (...) per-item weights
        reduction: "none", "sum" or "mean"

    Returns:
        Loss tensor
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n_classes = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ShapeError(f"cross_entropy targets outside [0, {n_classes})")
    nll = neg(gather_last(log_softmax(logits), targets))
    if weights is not None:
        nll = mul(nll, np.asarray(weights, dtype=logits.data.dtype))
    if reduction == "none":
        return nll
    if reduction == "sum":
        return tsum(nll)
    if reduction == "mean":
        return mean(nll)
    raise ValueError(f"unknown reduction {reduction!r}")


def grid_sample(value: Tensor, coords: Tensor) -> Tensor:
    """
    Bilinear sampling of a feature grid at fractional normalized positions.

    Position (x, y) in [0, 1]^2 maps to pixel-center coordinates
    u = x * W - 0.5, v = y * H - 0.5; samples outside the centers clamp to the
    border.

    Args:
        value: (B, H, W, C) feature grid
        coords: (B, N, 2) normalized (x, y) positions

    Returns:
        (B, N, C) sampled features
    """
    value, coords = as_tensor(value), as_tensor(coords)
    if value.ndim != 4 or coords.ndim != 3 or coords.shape[-1] != 2:
        raise ShapeError(
            f"grid_sample expects (B,H,W,C) and (B,N,2), got {value.shape}, {coords.shape}"
        )
    if value.shape[0] != coords.shape[0]:
        raise ShapeError(f"grid_sample batch mismatch: {value.shape[0]} vs {coords.shape[0]}")

    B, H, W, _ = value.shape
    N = coords.shape[1]
    v = value.data
    u_raw = coords.data[..., 0] * W - 0.5
    w_raw = coords.data[..., 1] * H - 0.5
    u = np.clip(u_raw, 0.0, W - 1.0)
    w = np.clip(w_raw, 0.0, H - 1.0)
    x0 = np.clip(np.floor(u).astype(np.int64), 0, W - 1)
    y0 = np.clip(np.floor(w).astype(np.int64), 0, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (u - x0)[..., None]
    fy = (w - y0)[..., None]
    b = np.repeat(np.arange(B), N).reshape(B, N)

    v00, v01 = v[b, y0, x0], v[b, y0, x1]
    v10, v11 = v[b, y1, x0], v[b, y1, x1]
    out = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11

    def backward(g):
        gv = np.zeros_like(v)
        np.add.at(gv, (b, y0, x0), g * (1 - fx) * (1 - fy))
        np.add.at(gv, (b, y0, x1), g * fx * (1 - fy))
        np.add.at(gv, (b, y1, x0), g * (1 - fx) * fy)
        np.add.at(gv, (b, y1, x1), g * fx * fy)

        du = (1 - fy) * (v01 - v00) + fy * (v11 - v10)
        dw = (1 - fx) * (v10 - v00) + fx * (v11 - v01)
        in_x = (u_raw > 0.0) & (u_raw < W - 1.0)
        in_y = (w_raw > 0.0) & (w_raw < H - 1.0)
        gx = np.sum(g * du, axis=-1) * W * in_x
        gy = np.sum(g * dw, axis=-1) * H * in_y
        return gv, np.stack([gx, gy], axis=-1)

    return _make(out, (value, coords), backward)
