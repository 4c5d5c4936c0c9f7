"""Classifier heads scoring features against per-class parameters.

:class:`MslHead` holds one low-rank Mahalanobis metric per class: a factor
L_c [r, n] and a bias b_c [n], scoring a feature h by ||L_c (h - b_c)||^2.
:class:`LinearHead` is the inner-product baseline w_c^T h. Both grow by
appending classes when a new task arrives and never touch existing ones.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    matmul,
    row_squared_norms,
    squared_l2_norm,
    stack_columns,
    sub,
    tile_rows,
    transpose,
)

PSD_TOL = 1e-9


@dataclass
class ClassMetric:
    L: Tensor
    b: Tensor
    class_id: int

    @property
    def sigma(self) -> np.ndarray:
        """The implied PSD metric L^T L."""
        return self.L.values.T @ self.L.values


def default_rank(n: int) -> int:
    return 64 if n >= 64 else n


class MslHead:
    kind = "msl"

    def __init__(self, n: int, r: Optional[int] = None):
        r = default_rank(n) if r is None else r
        if not 1 <= r <= n:
            raise ShapeError(f"rank must satisfy 1 <= r <= n, got r={r}, n={n}")
        self.n = n
        self.r = r
        self.metrics: list[ClassMetric] = []

    @property
    def num_classes(self) -> int:
        return len(self.metrics)

    def parameters(self) -> list:
        out = []
        for m in self.metrics:
            out += [m.L, m.b]
        return out

    def class_parameters(self, c: int) -> list:
        m = self.metrics[c]
        return [m.L, m.b]

    def copy(self, requires_grad: bool = True) -> "MslHead":
        head = MslHead(self.n, self.r)
        head.metrics = [
            ClassMetric(Tensor(m.L.values.copy(), requires_grad), Tensor(m.b.values.copy(), requires_grad), m.class_id)
            for m in self.metrics
        ]
        return head

    def scores(self, h_batch: Tensor) -> Tensor:
        return head_scores(self, h_batch)


def similarity_lowrank(h: Tensor, m: ClassMetric) -> Tensor:
    """||L (h - b)||^2 for a single feature vector."""
    if h.shape != m.b.shape:
        raise ShapeError(f"feature shape {h.shape} does not match bias shape {m.b.shape}")
    return squared_l2_norm(matmul(m.L, sub(h, m.b)))


def _check_psd_symmetric(sigma: np.ndarray) -> None:
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeError(f"metric must be square, got shape {sigma.shape}")
    asym = np.max(np.abs(sigma - sigma.T)) if sigma.size else 0.0
    if asym > PSD_TOL * max(1.0, np.max(np.abs(sigma))):
        raise ValueError(f"metric is not symmetric (max asymmetry {asym:.3g})")


def similarity_fullrank(h, sigma, b) -> float:
    """(h - b)^T sigma (h - b) with an explicit metric matrix; evaluation only."""
    h, sigma, b = (np.asarray(getattr(v, "values", v), dtype=np.float64) for v in (h, sigma, b))
    _check_psd_symmetric(sigma)
    if h.shape != b.shape or sigma.shape[0] != h.shape[0]:
        raise ShapeError(f"incompatible shapes h={h.shape}, sigma={sigma.shape}, b={b.shape}")
    r = h - b
    return float(r @ sigma @ r)


def eigen_identity_check(sigma, residual) -> tuple:
    """Both sides of r^T S r = ||diag(sqrt(eigvals)) V^T r||^2 for S = V diag(eigvals) V^T."""
    sigma = np.asarray(getattr(sigma, "values", sigma), dtype=np.float64)
    r = np.asarray(getattr(residual, "values", residual), dtype=np.float64)
    _check_psd_symmetric(sigma)
    eigvals, V = np.linalg.eigh(sigma)
    if eigvals.size and eigvals.min() < -PSD_TOL:
        raise ValueError(f"metric is not PSD (smallest eigenvalue {eigvals.min():.3g})")
    eigvals = np.clip(eigvals, 0.0, None)
    lhs = float(r @ sigma @ r)
    z = np.sqrt(eigvals) * (V.T @ r)
    return lhs, float(z @ z)


def head_scores(head: MslHead, h_batch: Tensor) -> Tensor:
    """[B, C] matrix of low-rank similarities for every (sample, class) pair.

    Each class column is computed independently of the others, so appending
    classes leaves existing columns bit-identical.
    """
    if h_batch.values.ndim != 2 or h_batch.shape[1] != head.n:
        raise ShapeError(f"expected features of shape [B, {head.n}], got {h_batch.shape}")
    if not head.metrics:
        raise ShapeError("head has no classes")
    B = h_batch.shape[0]
    cols = []
    for m in head.metrics:
        residual = sub(h_batch, tile_rows(m.b, B))
        cols.append(row_squared_norms(matmul(residual, transpose(m.L))))
    return stack_columns(cols)


def head_expand(head: MslHead, k: int, seed, init: str = "uniform", bias_init: Optional[np.ndarray] = None) -> MslHead:
    """Append ``k`` classes in place and return the head.

    New factors are uniform in [-1/sqrt(n), 1/sqrt(n)] (``init="zero"`` gives
    all-zero factors, whose scores are identically 0). New biases are zero
    unless ``bias_init`` supplies a [k, n] array, e.g. class feature means.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(head.n)
    if bias_init is not None and np.shape(bias_init) != (k, head.n):
        raise ShapeError(f"bias_init must have shape {(k, head.n)}, got {np.shape(bias_init)}")
    for i in range(k):
        if init == "uniform":
            L = rng.uniform(-bound, bound, size=(head.r, head.n))
        elif init == "zero":
            L = np.zeros((head.r, head.n))
        else:
            raise ValueError(f"unknown metric init {init!r}")
        b = np.zeros(head.n) if bias_init is None else np.array(bias_init[i], dtype=np.float64)
        head.metrics.append(ClassMetric(Tensor(L, True), Tensor(b, True), head.num_classes))
    return head


class LinearHead:
    """Inner-product baseline: one weight vector per class, score w_c^T h."""

    kind = "linear"

    def __init__(self, n: int):
        self.n = n
        self.weights: list[Tensor] = []

    @property
    def num_classes(self) -> int:
        return len(self.weights)

    def parameters(self) -> list:
        return list(self.weights)

    def class_parameters(self, c: int) -> list:
        return [self.weights[c]]

    def copy(self, requires_grad: bool = True) -> "LinearHead":
        head = LinearHead(self.n)
        head.weights = [Tensor(w.values.copy(), requires_grad) for w in self.weights]
        return head

    def scores(self, h_batch: Tensor) -> Tensor:
        if h_batch.values.ndim != 2 or h_batch.shape[1] != self.n:
            raise ShapeError(f"expected features of shape [B, {self.n}], got {h_batch.shape}")
        if not self.weights:
            raise ShapeError("head has no classes")
        return stack_columns([matmul(h_batch, w) for w in self.weights])


def linear_expand(head: LinearHead, k: int, seed, init: str = "uniform", bias_init=None) -> LinearHead:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(head.n)
    for _ in range(k):
        w = rng.uniform(-bound, bound, size=head.n) if init == "uniform" else np.zeros(head.n)
        head.weights.append(Tensor(w, True))
    return head


def expand(head, k: int, seed, init: str = "uniform", bias_init=None):
    if isinstance(head, MslHead):
        return head_expand(head, k, seed, init, bias_init)
    return linear_expand(head, k, seed, init)


# Serialized layout, all little-endian:
#   magic b"MSLH", uint32 version, uint32 C, uint32 r, uint32 n,
#   then per class: float64 L[r*n] row-major, float64 b[n].
_MAGIC = b"MSLH"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def save_head(head: MslHead, fh: BinaryIO) -> None:
    fh.write(_HEADER.pack(_MAGIC, _VERSION, head.num_classes, head.r, head.n))
    for m in head.metrics:
        fh.write(np.ascontiguousarray(m.L.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(m.b.values, dtype="<f8").tobytes())


def load_head(fh: BinaryIO) -> MslHead:
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise ValueError("truncated head header")
    magic, version, C, r, n = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise ValueError(f"not a serialized MSL head (magic {magic!r})")
    if version != _VERSION:
        raise ValueError(f"unsupported head format version {version}")
    head = MslHead(n, r)
    for c in range(C):
        buf = fh.read(8 * (r * n + n))
        if len(buf) != 8 * (r * n + n):
            raise ValueError(f"truncated data for class {c}")
        arr = np.frombuffer(buf, dtype="<f8").astype(np.float64)
        head.metrics.append(ClassMetric(Tensor(arr[: r * n].reshape(r, n), True), Tensor(arr[r * n :], True), c))
    return head
