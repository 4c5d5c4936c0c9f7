"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations record themselves on the active :class:`ComputationTape` when at
least one input requires a gradient. Outside a tape every op is a plain
numpy computation, which is how the teacher model is evaluated.

Shapes must match exactly; there is no implicit broadcasting. Use
:func:`tile_rows` to repeat a vector across a batch.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid hyperparameters or configuration values."""


class NonFiniteError(FloatingPointError):
    """Raised when an op would produce NaN or Inf."""


class Tensor:
    """A dense double-precision array with an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def clone(self) -> "Tensor":
        return Tensor(self.values.copy(), requires_grad=self.requires_grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], tuple]


class ComputationTape:
    """Ordered record of taped operations.

    Nodes are appended as ops execute, so every node's inputs are either
    leaves or outputs of earlier nodes. Use as a context manager::

        with ComputationTape() as tape:
            loss = squared_l2_norm(v)
        backward(loss, tape)
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "ComputationTape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    try:
        return _local.tapes
    except AttributeError:
        _local.tapes = []
        return _local.tapes


def active_tape() -> Optional[ComputationTape]:
    tapes = _stack()
    return tapes[-1] if tapes else None


def _emit(values: np.ndarray, inputs: Sequence[Tensor], rule, name: str) -> Tensor:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.requires_grad = track
    out.grad = None
    if track:
        tape.nodes.append(_Node(tuple(inputs), out, rule))
    return out


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` [m, k] with ``b`` [k, p] or a vector ``b`` [k]."""
    if a.values.ndim != 2 or b.values.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.values, b.values

    def rule(g):
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), rule, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.values + b.values, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.values, b.values
    return _emit(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op!r}; expected add, sub or mul") from None
    return fn(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit(a.values * factor, (a,), lambda g: (g * factor,), "scale")


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit(a.values.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tile_rows(v: Tensor, rows: int) -> Tensor:
    """Stack ``rows`` copies of vector ``v`` into a [rows, n] matrix."""
    if v.values.ndim != 1:
        raise ShapeError(f"tile_rows: expected a vector, got shape {v.shape}")
    out = np.repeat(v.values[None, :], rows, axis=0)
    return _emit(out, (v,), lambda g: (g.sum(axis=0),), "tile_rows")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _emit(a.values * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def squared_l2_norm(v: Tensor) -> Tensor:
    if v.values.ndim != 1:
        raise ShapeError(f"squared_l2_norm: expected a vector, got shape {v.shape}")
    V = v.values
    return _emit(np.asarray(V @ V), (v,), lambda g: (2.0 * g * V,), "squared_l2_norm")


def row_squared_norms(a: Tensor) -> Tensor:
    """Squared l2 norm of every row of a [B, k] matrix, as a [B] vector."""
    if a.values.ndim != 2:
        raise ShapeError(f"row_squared_norms: expected a matrix, got shape {a.shape}")
    A = a.values
    return _emit(np.einsum("ij,ij->i", A, A), (a,), lambda g: (2.0 * g[:, None] * A,), "row_squared_norms")


def stack_columns(columns: Sequence[Tensor]) -> Tensor:
    """Assemble C vectors of length B into a [B, C] matrix."""
    if not columns:
        raise ShapeError("stack_columns: need at least one column")
    first = columns[0].shape
    for c in columns:
        if c.values.ndim != 1 or c.shape != first:
            raise ShapeError(f"stack_columns: column shapes {first} and {c.shape} differ")
    out = np.stack([c.values for c in columns], axis=1)
    return _emit(out, tuple(columns), lambda g: tuple(g[:, i] for i in range(g.shape[1])), "stack_columns")


def slice_columns(a: Tensor, stop: int) -> Tensor:
    """The first ``stop`` columns of a [B, C] matrix."""
    if a.values.ndim != 2 or not 1 <= stop <= a.shape[1]:
        raise ShapeError(f"slice_columns: cannot take {stop} columns of {a.shape}")
    C = a.shape[1]

    def rule(g):
        full = np.zeros((g.shape[0], C))
        full[:, :stop] = g
        return (full,)

    return _emit(a.values[:, :stop].copy(), (a,), rule, "slice_columns")


def pick(a: Tensor, index: Sequence[int]) -> Tensor:
    """Select ``a[i, index[i]]`` for every row, giving a [B] vector."""
    idx = np.asarray(index, dtype=np.int64)
    if a.values.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError(f"pick: {len(idx)} indices for matrix of shape {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(a.values[rows, idx], (a,), rule, "pick")


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.asarray(a.values.sum()), (a,), lambda g: (np.full(shape, g),), "sum")


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.values.size
    return _emit(np.asarray(a.values.sum() / n), (a,), lambda g: (np.full(shape, g / n),), "mean")


def stable_log_softmax(logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Log-probabilities of a temperature-softened softmax, row by row.

    Works on a [C] vector or a [B, C] matrix. The row max is subtracted
    before exponentiating, so logits of any magnitude stay finite.
    """
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    x = logits.values
    if x.ndim not in (1, 2) or x.shape[-1] < 1:
        raise ShapeError(f"stable_log_softmax: bad logits shape {logits.shape}")
    z = (x - x.max(axis=-1, keepdims=True)) / temperature
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    inv_t = 1.0 / temperature

    def rule(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) * inv_t,)

    return _emit(out, (logits,), rule, "stable_log_softmax")


def backward(loss: Tensor, tape: ComputationTape, params: Iterable[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tracked tensor.

    Tensors listed in ``params`` that the loss does not depend on receive a
    zero gradient instead of being left untouched.
    """
    if loss.values.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones(())}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = inp
    for key, t in seen.items():
        if t.requires_grad:
            t.grad = grads[key] if t.grad is None else t.grad + grads[key]
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.values)


def finite_difference_grad(f: Callable[[np.ndarray], float], params: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``params.values``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = params.values.astype(np.float64, copy=True)
    out = np.empty_like(base)
    flat, gflat = base.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(base.copy()))
        flat[i] = orig - eps
        lo = float(f(base.copy()))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return Tensor(out)
