"""Dense float64 tensors with a small reverse-mode differentiation tape.

Only the operations the view-set model needs are provided. Forward passes use
``np.einsum`` and sorted reductions wherever a result must not depend on the
order of the rows it is computed from: BLAS ``matmul`` blocks rows differently
depending on their position, which breaks bitwise permutation symmetry.
Backward passes have no such requirement and use plain ``matmul``.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericsError(Exception):
    """Base class for errors raised by the tensor core."""


class DimensionError(NumericsError, ValueError):
    pass


class NonFiniteError(NumericsError, FloatingPointError):
    pass


class ContractError(NumericsError, RuntimeError):
    pass


class DeterminismError(NumericsError, RuntimeError):
    pass


_grad_enabled = True
# Test hook: multiplies every matmul input-gradient by this factor.
_matmul_grad_scale = 1.0


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupted_backward(scale: float = 1.01):
    """Deliberately wrong matmul gradients; negative control for gradient checks."""
    global _matmul_grad_scale
    prev = _matmul_grad_scale
    _matmul_grad_scale = scale
    try:
        yield
    finally:
        _matmul_grad_scale = prev


class Tensor:
    """An immutable float64 array plus the bookkeeping needed for backprop."""

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        arr = np.array(data, dtype=np.float64) if copy else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -1.0 * _as_tensor(other))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other: float):
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is accumulated by :func:`backward`."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> np.ndarray:
        return self.data

    def assign(self, new: np.ndarray) -> None:
        new = np.array(new, dtype=np.float64)
        if new.shape != self.data.shape:
            raise DimensionError(f"{self.name}: shape {new.shape} != {self.data.shape}")
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"{self.name}: non-finite update")
        new.flags.writeable = False
        self.data = new

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` as a tensor and, if needed, record how to backprop through it.

    ``backward_fn(g)`` receives the gradient of ``out`` and returns one gradient
    (or None) per parent.
    """
    t = Tensor(out, copy=False)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward_fn
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def sorted_sum(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` in ascending value order.

    The result depends only on the multiset of values along the axis.
    """
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return custom_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return custom_op(a.data * c, (a,), lambda g: (g * c,))
    a = _as_tensor(a)
    return custom_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


# ------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return custom_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return custom_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(out, tensors, back)


def take_rows(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Slice ``x[start:stop]`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return custom_op(x.data[idx], (x,), back)


# ------------------------------------------------------------------ products

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes of ``a`` broadcast.

    ``b`` may be a single matrix shared by every leading index of ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = np.einsum("...ik,...kj->...ij", a.data, b.data)

    def back(g):
        s = _matmul_grad_scale
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape) * s, _unbroadcast(gb, b.shape) * s

    return custom_op(out, (a, b), back)


def matmul_t(a: Tensor, b: Tensor) -> Tensor:
    """``a @ swapaxes(b)``: pairwise row dot products, e.g. attention logits."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"row widths differ: {a.shape} vs {b.shape}")
    out = np.einsum("...ik,...jk->...ij", a.data, b.data)

    def back(g):
        s = _matmul_grad_scale
        ga = g @ b.data
        gb = np.swapaxes(g, -1, -2) @ a.data
        return _unbroadcast(ga, a.shape) * s, _unbroadcast(gb, b.shape) * s

    return custom_op(out, (a, b), back)


def mix_rows(weights: Tensor, rows: Tensor) -> Tensor:
    """``weights @ rows`` with the contraction summed in sorted order.

    Output row i is a weighted combination of all rows; because each sum is
    taken in value order, permuting ``rows`` (and the matching columns of
    ``weights``) leaves every output entry bitwise unchanged.
    """
    if weights.shape[-1] != rows.shape[-2]:
        raise DimensionError(f"mix_rows extents differ: {weights.shape} vs {rows.shape}")
    prod = weights.data[..., :, :, None] * rows.data[..., None, :, :]
    out = sorted_sum(prod, axis=-2)

    def back(g):
        gw = g @ np.swapaxes(rows.data, -1, -2)
        gr = np.swapaxes(weights.data, -1, -2) @ g
        return _unbroadcast(gw, weights.shape), _unbroadcast(gr, rows.shape)

    return custom_op(out, (weights, rows), back)


# ---------------------------------------------------------------- reductions

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    x = _as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = e / sorted_sum(e, axis=-1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op(y, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return custom_op(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance, then scale and shift."""
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("layer_norm needs at least one column")
    if gain.shape != (n,) or bias.shape != (n,):
        raise DimensionError(f"gain/bias must have shape ({n},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return custom_op(out, (x, gain, bias), back)


def max_over(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return custom_op(out, (x,), back)


def mean_over(x: Tensor, axis: int) -> Tensor:
    """Order-free mean along ``axis`` (sorted summation)."""
    axis = axis % x.ndim
    n = x.shape[axis]
    out = sorted_sum(x.data, axis=axis) / n
    return custom_op(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),))


def total(x: Tensor) -> Tensor:
    """Sum of every entry, as a scalar tensor."""
    return custom_op(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return custom_op(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ------------------------------------------------------------------ backprop

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`.

    The recorded graph is released afterwards; calling again on the same loss
    reaches no parameters.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(_topological(loss)):
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
        node._parents = ()
        node._backward = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def grad_check(closure: Callable[[], Tensor], params: Sequence[Parameter], step: float = 1e-5) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    The error for one coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``closure`` must be deterministic; it is evaluated twice up front to check.
    """
    with no_grad():
        f0 = closure().item()
        f1 = closure().item()
    if f0 != f1:
        raise DeterminismError(f"closure gave {f0!r} then {f1!r}")
    zero_grad(params)
    backward(closure())
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        base = p.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            bumped = base.copy().reshape(-1)
            bumped[i] = orig + step
            p.assign(bumped.reshape(base.shape))
            with no_grad():
                up = closure().item()
            bumped[i] = orig - step
            p.assign(bumped.reshape(base.shape))
            with no_grad():
                down = closure().item()
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, float(err))
        p.assign(base)
    zero_grad(params)
    return worst
