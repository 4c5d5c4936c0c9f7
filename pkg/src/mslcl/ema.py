"""Teacher snapshots and exponential-moving-average updates toward the student."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import ConfigError, ShapeError
from .model import Model


@dataclass
class ModelPair:
    """The trained model and, from the second task on, its EMA teacher."""

    current: Model
    old: Optional[Model] = None
    gamma: float = 0.96

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")


def snapshot_teacher(current: Model) -> Model:
    """Deep copy with gradients disabled, so the teacher never joins a tape."""
    return current.copy(requires_grad=False)


def shared_parameters(pair: ModelPair) -> list:
    """(old, current) tensor pairs over the backbone and the old label space."""
    if pair.old is None:
        return []
    old, cur = pair.old, pair.current
    pairs = list(zip(old.backbone.parameters(), cur.backbone.parameters()))
    if len(old.backbone.parameters()) != len(cur.backbone.parameters()):
        raise ShapeError("teacher and student backbones have different depth")
    if old.head.num_classes > cur.head.num_classes:
        raise ShapeError("teacher has more classes than the student")
    for c in range(old.head.num_classes):
        pairs += list(zip(old.head.class_parameters(c), cur.head.class_parameters(c)))
    return pairs


def ema_update(pair: ModelPair) -> None:
    """old <- gamma * old + (1 - gamma) * current, in place, on shared parameters."""
    g = pair.gamma
    for p_old, p_cur in shared_parameters(pair):
        if p_old.shape != p_cur.shape:
            raise ShapeError(f"EMA shape mismatch {p_old.shape} vs {p_cur.shape}")
        v = g * p_old.values + (1.0 - g) * p_cur.values
        np.copyto(p_old.values, v)
