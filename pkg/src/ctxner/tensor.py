"""Dense float64 tensors with reverse-mode gradients.

Every operation builds a node that remembers its parents and a closure
mapping the output gradient to parent gradients. ``backward`` walks the
recorded graph of one forward pass in reverse topological order.

Broadcasting is deliberately narrow: binary elementwise ops accept
operands of identical shape, or a right operand whose shape equals the
trailing dimensions of the left operand (bias-vector broadcast).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "elementwise",
    "matmul",
    "transpose",
    "concat",
    "stack",
    "take_rows",
    "getitem",
    "total",
    "logsumexp",
    "log_softmax",
    "conv1d_maxpool",
    "backward",
    "no_grad",
]

DTYPE = np.float64

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-dimensional float64 array that can carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @classmethod
    def zeros(cls, shape, requires_grad: bool = False, name: str | None = None) -> "Tensor":
        return cls(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    nb = b.data.ndim
    if nb < a.data.ndim and a.shape[a.data.ndim - nb:] == b.shape:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ----------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sb = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sb = b.shape
    return _node(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd, sb = a.data, b.data, b.shape
    return _node(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, sb)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    # logaddexp form never overflows
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, *args: Tensor) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``sigmoid``, ...)."""
    if op_kind in _BINARY:
        if len(args) != 2:
            raise TypeError(f"{op_kind} takes 2 operands, got {len(args)}")
        return _BINARY[op_kind](*args)
    if op_kind in _UNARY:
        if len(args) != 1:
            raise TypeError(f"{op_kind} takes 1 operand, got {len(args)}")
        return _UNARY[op_kind](args[0])
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ------------------------------------------------------------------ structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands; a 1-D left operand acts as a row."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        if ad.ndim == 1:
            return g @ bd.T, np.outer(ad, g)
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), _back)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic(index)

    def _back(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(a.data[index], dtype=DTYPE), (a,), _back)


def take_rows(table: Tensor, ids: Sequence[int] | np.ndarray) -> Tensor:
    """Gather rows of a matrix; repeated ids accumulate gradient."""
    idx = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def _back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), _back)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise DimensionError("concat of zero tensors")
    arrays = [p.data for p in parts]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return _node(out, tuple(parts), lambda g: np.split(g, bounds, axis=axis))


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    if not parts:
        raise DimensionError("stack of zero tensors")
    try:
        out = np.stack([p.data for p in parts])
    except ValueError as exc:
        raise DimensionError(f"stack: incompatible shapes {[p.shape for p in parts]}") from exc
    return _node(out, tuple(parts), lambda g: list(g))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, g, dtype=DTYPE),))


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(x - m).sum(axis=axis, keepdims=True)
    out_keep = m + np.log(s)
    out = np.squeeze(out_keep, axis=axis)

    def _back(g):
        soft = np.exp(x - out_keep)
        return (np.expand_dims(g, axis) * soft,)

    return _node(out, (a,), _back)


def log_softmax(a: Tensor) -> Tensor:
    """Log-probabilities along the last axis via a max-shifted logsumexp."""
    x = a.data
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"log_softmax needs a last axis of size >= 1, got {a.shape}")
    m = x.max(axis=-1, keepdims=True)
    shifted = x - m
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def _back(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), _back)


def conv1d_maxpool(chars: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Width-3 convolution over a zero-padded L x d_c matrix, max-pooled over positions.

    ``filters`` is F x (3*d_c); window rows are flattened in order
    (left, centre, right). Returns the F pooled affine responses; ties in
    the max go to the earliest position.
    """
    if chars.data.ndim != 2 or chars.shape[0] < 1:
        raise DimensionError(f"conv1d_maxpool needs a non-empty L x d_c matrix, got {chars.shape}")
    L, dc = chars.shape
    if filters.data.ndim != 2 or filters.shape[1] != 3 * dc:
        raise DimensionError(f"filters shape {filters.shape} does not match window width 3*{dc}")
    n_filt = filters.shape[0]
    if bias.shape != (n_filt,):
        raise DimensionError(f"bias shape {bias.shape} does not match {n_filt} filters")
    padded = np.zeros((L + 2, dc), dtype=DTYPE)
    padded[1:-1] = chars.data
    windows = np.concatenate([padded[0:L], padded[1:L + 1], padded[2:L + 2]], axis=1)
    responses = windows @ filters.data.T + bias.data
    best = responses.argmax(axis=0)
    out = responses[best, np.arange(n_filt)]
    fdata = filters.data

    def _back(g):
        g_filters = g[:, None] * windows[best]
        g_windows = np.zeros_like(windows)
        np.add.at(g_windows, best, g[:, None] * fdata)
        g_padded = np.zeros_like(padded)
        g_padded[0:L] += g_windows[:, :dc]
        g_padded[1:L + 1] += g_windows[:, dc:2 * dc]
        g_padded[2:L + 2] += g_windows[:, 2 * dc:]
        return g_padded[1:-1], g_filters, g.copy()

    return _node(out, (chars, filters, bias), _back)


# -------------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the graph."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parents, fn = node._parents, node._backward
        # graph is single-use; dropping closures frees activations early
        node._parents, node._backward = (), None
        for parent, pg in zip(parents, fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE).reshape(parent.shape)
