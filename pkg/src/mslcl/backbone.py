"""Multilayer perceptron feature extractor mapping inputs to R^n."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ConfigError, ShapeError, Tensor, add, matmul, relu, tanh, tile_rows

ACTIVATIONS = {"relu": relu, "tanh": tanh}


@dataclass(frozen=True)
class BackboneConfig:
    input_dim: int
    feature_dim: int
    hidden_dims: tuple = ()
    activation: str = "relu"
    seed: int = 0

    def validate(self) -> None:
        dims = [self.input_dim, *self.hidden_dims, self.feature_dim]
        if any(int(d) < 1 for d in dims):
            raise ConfigError(f"backbone dimensions must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")


@dataclass
class BackboneParams:
    """Layer weights [fan_in, fan_out] and biases [fan_out], in order."""

    weights: list
    biases: list
    activation: str = "relu"

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self, requires_grad: bool = True) -> "BackboneParams":
        return BackboneParams(
            [Tensor(w.values.copy(), requires_grad) for w in self.weights],
            [Tensor(b.values.copy(), requires_grad) for b in self.biases],
            self.activation,
        )


def backbone_init(config: BackboneConfig) -> BackboneParams:
    """Fan-in scaled uniform weights, zero biases, fully determined by the seed."""
    config.validate()
    rng = np.random.default_rng(int(config.seed))
    dims = [config.input_dim, *config.hidden_dims, config.feature_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return BackboneParams(weights, biases, config.activation)


def backbone_forward(params: BackboneParams, x: Tensor) -> Tensor:
    """Features for a [B, d] batch; the activation sits between layers only."""
    if x.values.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"backbone expects inputs of shape [B, {params.input_dim}], got {x.shape}")
    act = ACTIVATIONS[params.activation]
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), tile_rows(b, h.shape[0]))
        if i < last:
            h = act(h)
    return h
