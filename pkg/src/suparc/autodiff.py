"""Define-by-run reverse-mode automatic differentiation over dense float64 arrays.

Only the operations the fusion network and its objectives need are provided.
Broadcasting is limited to scalar-vs-tensor; the one exception is
:func:`add_bias`, which adds a row vector to every row of a matrix.

Every result tensor records its parents and a closure mapping the upstream
gradient to per-parent gradients. Nodes carry a monotonically increasing id,
so sorting the reachable nodes by id yields a valid topological order (the
tape) without keeping any global list alive.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DegenerateInputError, DimensionError

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "clamp",
    "cos",
    "arccos",
    "add_bias",
    "tensor_sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "cosine_similarity",
    "pairwise_cosine",
    "rowwise_cosine",
    "finite_difference_gradient",
    "relative_error",
    "ARCCOS_EPS",
    "LOG_FLOOR",
]

ARCCOS_EPS = 1e-7
LOG_FLOOR = 1e-12
NORM_FLOOR = 1e-12
EXP_CEIL = 700.0

_node_ids = itertools.count()
_grad_enabled = contextvars.ContextVar("suparc_grad_enabled", default=True)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, evaluation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """Dense float64 array that optionally participates in the tape.

    Leaves created with ``requires_grad=True`` are parameters: their ``grad``
    is a zero array of the same shape until :func:`backward` accumulates into
    it. Intermediate results never store gradients.
    """

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.values) if self.requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_node_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis: int | None = None) -> Tensor:
        return tensor_sum(self, axis)

    def mean(self) -> Tensor:
        return mean(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def relu(self) -> Tensor:
        return relu(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)

    def abs(self) -> Tensor:
        return absolute(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(values: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.name = None
    out._id = next(_node_ids)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients accumulate across calls; call ``zero_grad`` on the parameters
    before each batch.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", type(loss).__name__)
        raise ContractError(f"backward requires a scalar loss, got shape {shape}")
    if not loss.requires_grad:
        return
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        nodes[node._id] = node
        for parent in node._parents:
            if parent.requires_grad and parent._id not in nodes:
                stack.append(parent)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.values)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# ---------------------------------------------------------------- binary ops

def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.values + b.values, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.values - b.values, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _result(a.values * b.values, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    out = a.values / b.values

    def grad_fn(g):
        return (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * out / b.values, b.shape),
        )

    return _result(out, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def grad_fn(g):
        ga = g @ b.values.T if a.requires_grad else None
        gb = a.values.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.values @ b.values, (a, b), grad_fn)


def add_bias(x, bias) -> Tensor:
    """``x[i, :] + bias`` for every row i of a 2-D ``x``."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: bias {bias.shape} does not match rows of {x.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _result(x.values + bias.values, (x, bias), grad_fn)


# ----------------------------------------------------------------- unary ops

def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _result(-x.values, (x,), lambda g: (-g,))


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _result(x.values * factor, (x,), lambda g: (g * factor,))


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.values)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.values))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    active = x.values > 0
    return _result(np.where(active, x.values, 0.0), (x,), lambda g: (g * active,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    inside = x.values <= EXP_CEIL
    out = np.exp(np.minimum(x.values, EXP_CEIL))
    return _result(out, (x,), lambda g: (g * out * inside,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    inside = x.values >= LOG_FLOOR
    clamped = np.maximum(x.values, LOG_FLOOR)
    return _result(np.log(clamped), (x,), lambda g: (g * inside / clamped,))


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    inside = x.values >= LOG_FLOOR
    out = np.sqrt(np.maximum(x.values, LOG_FLOOR))
    return _result(out, (x,), lambda g: (g * inside * 0.5 / out,))


def absolute(x) -> Tensor:
    """|x| with subgradient sign(x), sign(0) = 0."""
    x = _as_tensor(x)
    sign = np.sign(x.values)
    return _result(np.abs(x.values), (x,), lambda g: (g * sign,))


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip into [lo, hi]; zero gradient wherever the bound is active."""
    x = _as_tensor(x)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    inside = (x.values >= lo_v) & (x.values <= hi_v)
    return _result(np.clip(x.values, lo_v, hi_v), (x,), lambda g: (g * inside,))


def cos(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.cos(x.values), (x,), lambda g: (-g * np.sin(x.values),))


def arccos(x) -> Tensor:
    """arccos with the input clamped to [-1 + eps, 1 - eps].

    The derivative is evaluated at the clamped point and passed through even
    where the clamp is active, so it is finite everywhere and bounded by
    1 / sqrt(2 eps - eps**2).
    """
    x = _as_tensor(x)
    clamped = np.clip(x.values, -1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS)
    slope = -1.0 / np.sqrt(1.0 - clamped * clamped)
    return _result(np.arccos(clamped), (x,), lambda g: (g * slope,))


# ------------------------------------------------------------ shape/reduce

def tensor_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        return _result(np.asarray(x.values.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _result(x.values.sum(axis=axis), (x,), grad_fn)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    if x.size == 0:
        raise ContractError("mean of an empty tensor")
    n = x.size
    return _result(np.asarray(x.values.mean()), (x,), lambda g: (np.full(x.shape, g / n),))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")
    return _result(x.values.T.copy(), (x,), lambda g: (g.T,))


def _getitem(x: Tensor, index) -> Tensor:
    out = x.values[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def grad_fn(g):
        full = np.zeros_like(x.values)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=np.float64), (x,), grad_fn)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, grad_fn)


def take_rows(table, indices) -> Tensor:
    """Row gather ``table[indices]`` (embedding lookup)."""
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a matrix, got shape {table.shape}")

    def grad_fn(g):
        full = np.zeros_like(table.values)
        np.add.at(full, indices, g)
        return (full,)

    return _result(table.values[indices], (table,), grad_fn)


# ------------------------------------------------------------------ cosine

def _row_norms(values: np.ndarray, what: str) -> np.ndarray:
    norms = np.sqrt(np.sum(values * values, axis=-1))
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{what}: cosine similarity of an all-zero vector")
    return norms


def cosine_similarity(a, b) -> Tensor:
    """Cosine of the angle between two equal-length vectors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape or a.size < 1:
        raise DimensionError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    out = rowwise_cosine(reshape(a, (1, -1)), reshape(b, (1, -1)))
    return reshape(out, ())


def rowwise_cosine(a, b) -> Tensor:
    """``cos(a[i], b[i])`` for each row i; returns a vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or a.shape != b.shape:
        raise DimensionError(f"rowwise_cosine: shapes {a.shape} and {b.shape}")
    na = _row_norms(a.values, "rowwise_cosine")
    nb = _row_norms(b.values, "rowwise_cosine")
    dots = np.sum(a.values * b.values, axis=1)
    out = np.clip(dots / (na * nb), -1.0, 1.0)

    def grad_fn(g):
        fa = np.maximum(na, NORM_FLOOR)[:, None]
        fb = np.maximum(nb, NORM_FLOOR)[:, None]
        s = out[:, None]
        gc = g[:, None]
        ga = gc * (b.values / (fa * fb) - s * a.values / (fa * fa))
        gb = gc * (a.values / (fa * fb) - s * b.values / (fb * fb))
        return ga, gb

    return _result(out, (a, b), grad_fn)


def pairwise_cosine(h) -> Tensor:
    """n x n matrix of cosine similarities between the rows of ``h``."""
    h = _as_tensor(h)
    if h.ndim != 2:
        raise DimensionError(f"pairwise_cosine expects a matrix, got shape {h.shape}")
    norms = _row_norms(h.values, "pairwise_cosine")
    unit = h.values / norms[:, None]
    out = np.clip(unit @ unit.T, -1.0, 1.0)

    def grad_fn(g):
        g_unit = (g + g.T) @ unit
        radial = np.sum(g_unit * unit, axis=1, keepdims=True)
        return ((g_unit - radial * unit) / np.maximum(norms, NORM_FLOOR)[:, None],)

    return _result(out, (h,), grad_fn)


# ------------------------------------------------------------------ oracle

def finite_difference_gradient(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of d f(x) / dx, one coordinate at a time.

    ``f`` receives a constant :class:`Tensor` and returns a scalar (Tensor or
    float). It must be deterministic.
    """
    base = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            out = f(Tensor(arr))
        return float(out.item() if isinstance(out, Tensor) else out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = evaluate(base)
        flat[i] = orig - h
        down = evaluate(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Max over coordinates of |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
