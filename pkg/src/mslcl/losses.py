"""Similarity cross-entropy, temperature distillation, and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    ConfigError,
    ShapeError,
    Tensor,
    add,
    mean,
    mul,
    pick,
    scale,
    slice_columns,
    stable_log_softmax,
    total,
)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-3
    tau: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")


def ce_loss(scores: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of softmax(scores) at the true labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if scores.values.ndim != 2 or labels.shape != (scores.shape[0],):
        raise ShapeError(f"ce_loss: {labels.shape} labels for scores of shape {scores.shape}")
    C = scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        bad = labels[(labels < 0) | (labels >= C)]
        raise ValueError(f"labels {sorted(set(bad.tolist()))} outside [0, {C})")
    return scale(mean(pick(stable_log_softmax(scores, 1.0), labels)), -1.0)


def softened_probs(scores, tau: float) -> np.ndarray:
    """Untaped softmax(scores / tau) row by row."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    s = np.asarray(getattr(scores, "values", scores), dtype=np.float64)
    z = (s - s.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def distillation_loss(scores_current: Tensor, scores_old, tau: float) -> Tensor:
    """Mean cross-entropy from the old model's softened predictions to the current one's.

    ``scores_old`` is treated as a constant. When the current model has more
    columns than the old one, only the first ``C_old`` are used, so both
    distributions are normalized over the old label space.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    old = np.asarray(getattr(scores_old, "values", scores_old), dtype=np.float64)
    if old.ndim != 2 or scores_current.values.ndim != 2 or old.shape[0] != scores_current.shape[0]:
        raise ShapeError(f"distillation_loss: shapes {scores_current.shape} and {old.shape}")
    c_old = old.shape[1]
    if scores_current.shape[1] < c_old:
        raise ShapeError(
            f"distillation_loss: current scores have {scores_current.shape[1]} columns, old have {c_old}"
        )
    current = scores_current if scores_current.shape[1] == c_old else slice_columns(scores_current, c_old)
    p_old = Tensor(softened_probs(old, tau))
    log_p = stable_log_softmax(current, tau)
    return scale(total(mul(p_old, log_p)), -1.0 / old.shape[0])


def total_loss(ce: Tensor, dis: Optional[Tensor], lam: float) -> Tensor:
    """ce + lam * dis; a missing distillation term (first task) counts as zero."""
    if dis is None:
        return ce
    return add(ce, scale(dis, lam))
