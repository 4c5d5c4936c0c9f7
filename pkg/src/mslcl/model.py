"""A backbone paired with a classifier head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .backbone import BackboneParams, backbone_forward


@dataclass
class Model:
    backbone: BackboneParams
    head: object

    def parameters(self) -> list:
        return self.backbone.parameters() + self.head.parameters()

    def copy(self, requires_grad: bool = True) -> "Model":
        return Model(self.backbone.copy(requires_grad), self.head.copy(requires_grad))

    def scores(self, x: Tensor) -> Tensor:
        return self.head.scores(backbone_forward(self.backbone, x))


def model_scores(model: Model, features) -> np.ndarray:
    """Untaped [B, C] class scores for raw features."""
    x = Tensor(np.asarray(features, dtype=np.float64))
    return model.head.scores(backbone_forward(model.backbone, x)).values
