"""Accuracy, average accuracy and backward transfer over a task sequence.

``a[t][j]`` is the accuracy on task t's test data under the model trained
through task j (0-based here), defined for j >= t. Backward transfer uses
the convention (accuracy right after learning) - (final accuracy), so
positive values mean forgetting and lower is better.
"""

from __future__ import annotations

from fractions import Fraction
from typing import Sequence

import numpy as np

from .model import model_scores


class MissingEntryError(ValueError):
    """An accuracy-matrix entry needed by a formula was never recorded."""


class AccuracyMatrix:
    """Upper-triangular q x q record of per-task accuracies (NaN = undefined)."""

    def __init__(self, q: int):
        self.q = q
        self.values = np.full((q, q), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        arr = np.array([[np.nan if v is None else v for v in row] for row in rows], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"accuracy matrix must be square, got shape {arr.shape}")
        m = cls(arr.shape[0])
        m.values = arr
        return m

    def record(self, task: int, checkpoint: int, accuracy: float) -> None:
        if checkpoint < task:
            raise ValueError(f"task {task} has not been learned at checkpoint {checkpoint}")
        if not 0.0 <= accuracy <= 1.0:
            raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
        self.values[task, checkpoint] = accuracy

    def __getitem__(self, key):
        return self.values[key]

    def to_rows(self) -> list:
        return [[None if np.isnan(v) else float(v) for v in row] for row in self.values]


def _as_matrix(matrix) -> np.ndarray:
    if isinstance(matrix, AccuracyMatrix):
        return matrix.values
    return AccuracyMatrix.from_rows(matrix).values


def _exact(v: float) -> Fraction:
    # Shortest round-trip decimal, so 0.9 - 0.8 is 1/10 rather than its binary neighbour.
    return Fraction(repr(float(v)))


def exact_mean(values: Sequence[float]) -> float:
    values = list(values)
    if not values:
        raise ValueError("mean of no values")
    return float(sum((_exact(v) for v in values), Fraction(0)) / len(values))


def _entry(a: np.ndarray, t: int, j: int) -> Fraction:
    v = a[t, j]
    if np.isnan(v):
        raise MissingEntryError(f"accuracy for task {t + 1} after task {j + 1} is missing")
    return _exact(v)


def average_accuracy(matrix) -> float:
    """Mean over tasks of the final model's accuracy."""
    a = _as_matrix(matrix)
    q = a.shape[0]
    return float(sum((_entry(a, t, q - 1) for t in range(q)), Fraction(0)) / q)


def backward_transfer(matrix) -> float:
    """Mean over tasks of (accuracy right after the task) - (final accuracy)."""
    a = _as_matrix(matrix)
    q = a.shape[0]
    return float(sum((_entry(a, t, t) - _entry(a, t, q - 1) for t in range(q)), Fraction(0)) / q)


def predict(scores) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    s = np.asarray(getattr(scores, "values", scores))
    return np.argmax(s, axis=1)


def evaluate_accuracy(model, features: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose highest-scoring class is the label."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("cannot evaluate accuracy on an empty sample set")
    C = model.head.num_classes
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels outside the {C} classes known to the model")
    pred = predict(model_scores(model, features))
    return float(np.count_nonzero(pred == labels)) / labels.size
