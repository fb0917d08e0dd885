"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation records a closure that pushes the output
gradient back into its inputs. ``Tensor.backward`` walks the tape in reverse
topological order from a scalar root. Arrays of any rank are accepted, which
lets the model code carry batch and head axes in front of the ``n x n`` and
``n x d`` matrices it actually reasons about.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, DimensionError

ArrayLike = Union[np.ndarray, float, int, Sequence]

_grad_enabled = True
# Test hook: scales the gradient matmul sends to its inputs (negative control
# for the gradient checks).
_matmul_grad_scale = 1.0


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def tampered_gradients(factor: float = 1.01) -> Iterator[None]:
    """Corrupt matmul backward by ``factor``. Only for negative-control tests."""
    global _matmul_grad_scale
    prev = _matmul_grad_scale
    _matmul_grad_scale = factor
    try:
        yield
    finally:
        _matmul_grad_scale = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A float64 array that can take part in the gradient tape."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray, dict], None]] = None

    # -- basic protocol ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # leaves own a private buffer; intermediate nodes may share
            self.grad = np.array(g, dtype=np.float64) if self._backward is None else g
        else:
            self.grad = self.grad + g

    # -- tape ---------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that is not on the tape")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is not None:
                node._backward(g, grads)

    # -- operator sugar -------------------------------------------------------
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named trainable leaf tensor."""

    def __init__(self, data: ArrayLike, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _send(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        _send(grads, a, _unbroadcast(g, a.shape))
        _send(grads, b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        _send(grads, a, _unbroadcast(g, a.shape))
        _send(grads, b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g, grads):
        if a.requires_grad:
            _send(grads, a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(grads, b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g, grads):
        if a.requires_grad:
            _send(grads, a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _send(grads, b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g, grads):
        g = g * _matmul_grad_scale
        if a.requires_grad:
            _send(grads, a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _send(grads, b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g, grads):
        _send(grads, a, np.transpose(g, inverse))

    return _node(np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def bw(g, grads):
        _send(grads, a, g.reshape(a.shape))

    return _node(a.data.reshape(tuple(shape)), (a,), bw)


def take(a: Tensor, idx) -> Tensor:
    """``a[idx]`` with scatter-add backward (repeated indices accumulate)."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def bw(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _send(grads, a, full)

    return _node(a.data[idx], (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` for integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range [0, {table.shape[0]})")
    return take(table, ids)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g, grads):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(grads, a, np.broadcast_to(g, a.shape).copy())

    return _node(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def where(mask: np.ndarray, a: Tensor, fill: float = 0.0) -> Tensor:
    """Keep ``a`` where ``mask`` is true, constant ``fill`` elsewhere."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, fill)

    def bw(g, grads):
        _send(grads, a, _unbroadcast(np.where(mask, g, 0.0), a.shape))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g, grads):
        _send(grads, a, g * out)

    return _node(out, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log of a non-positive value")

    def bw(g, grads):
        _send(grads, a, g / a.data)

    return _node(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    """Square root; input must be strictly positive."""
    if np.any(a.data <= 0):
        raise ContractError("sqrt requires strictly positive input")
    out = np.sqrt(a.data)

    def bw(g, grads):
        _send(grads, a, g * 0.5 / out)

    return _node(out, (a,), bw)


def sqrt_nonneg(a: Tensor) -> Tensor:
    """Square root of a non-negative input, using the zero subgradient at 0.

    Used for distances: sqrt of a sum of squares is not differentiable where
    the sum vanishes, and 0 is the minimal-norm subgradient there.
    """
    if np.any(a.data < 0):
        raise ContractError("sqrt_nonneg requires non-negative input")
    out = np.sqrt(a.data)

    def bw(g, grads):
        safe = np.where(out > 0, out, 1.0)
        _send(grads, a, np.where(out > 0, g * 0.5 / safe, 0.0))

    return _node(out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)

    def bw(g, grads):
        _send(grads, a, g * out * (1.0 - out))

    return _node(out, (a,), bw)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow for large |x|."""
    out = -np.logaddexp(0.0, -a.data)

    def bw(g, grads):
        _send(grads, a, g * _sigmoid(-a.data))

    return _node(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0

    def bw(g, grads):
        _send(grads, a, g * pos)

    return _node(np.where(pos, a.data, 0.0), (a,), bw)


def elu_plus_one(a: Tensor) -> Tensor:
    """ELU(x) + 1: x + 1 for x > 0, exp(x) otherwise. Always > 0."""
    pos = a.data > 0
    expo = np.exp(np.minimum(a.data, 0.0))
    out = np.where(pos, a.data + 1.0, expo)

    def bw(g, grads):
        _send(grads, a, g * np.where(pos, 1.0, expo))

    return _node(out, (a,), bw)


# ---------------------------------------------------------------------------
# normalisation, softmax, dropout
# ---------------------------------------------------------------------------

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False are exactly 0.

    Logits are shifted by the row max over allowed entries and disallowed
    entries get an additive -1e9 before exponentiation, then are zeroed, so
    arbitrary (even infinite) values in masked slots never leak into a row.
    """
    x = as_tensor(x)
    if mask is None:
        z = x.data - x.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise ContractError("softmax_rows: a row has every entry masked")
        safe = np.where(mask, x.data, -np.inf)
        z = np.where(mask, x.data - safe.max(axis=-1, keepdims=True), -1e9)
        e = np.where(mask, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g, grads):
        _send(grads, x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-8) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g, grads):
        if gain.requires_grad:
            _send(grads, gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _send(grads, bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
            _send(grads, x, gx)

    return _node(out, (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    m = (rng.random(x.shape) < keep) / keep
    return mul(x, m)
