import numpy as np
import pytest

from mslcl.autodiff import ComputationTape, ConfigError, ShapeError, Tensor, backward, mean, row_squared_norms
from mslcl.backbone import BackboneConfig, BackboneParams, backbone_forward, backbone_init

from conftest import numeric_grad, rel_err


def test_same_seed_bit_identical():
    cfg = BackboneConfig(input_dim=5, feature_dim=3, hidden_dims=(7, 4), seed=99)
    a, b = backbone_init(cfg), backbone_init(cfg)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.values.tobytes() == q.values.tobytes()


def test_zero_depth_is_single_linear_map():
    params = backbone_init(BackboneConfig(input_dim=4, feature_dim=3))
    assert len(params.weights) == 1
    assert params.weights[0].shape == (4, 3)


def test_init_bound_fan_in_four():
    params = backbone_init(BackboneConfig(input_dim=4, feature_dim=2500, seed=3))
    w = params.weights[0].values
    assert w.size == 10_000
    assert w.min() >= -0.5 and w.max() <= 0.5
    assert np.all(params.biases[0].values == 0)


@pytest.mark.parametrize("bad", [
    dict(input_dim=0, feature_dim=3),
    dict(input_dim=2, feature_dim=0),
    dict(input_dim=2, feature_dim=3, hidden_dims=(4, 0)),
    dict(input_dim=2, feature_dim=3, activation="gelu"),
])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        backbone_init(BackboneConfig(**bad))


def test_identity_network():
    params = BackboneParams([Tensor(np.eye(3), True)], [Tensor(np.zeros(3), True)])
    x = np.array([[1.0, -2.0, 0.5], [0.0, 3.0, 4.0]])
    np.testing.assert_array_equal(backbone_forward(params, Tensor(x)).values, x)


def test_identical_rows_give_identical_features():
    params = backbone_init(BackboneConfig(input_dim=3, feature_dim=4, hidden_dims=(5,), seed=1))
    x = np.tile([0.3, -1.0, 2.0], (6, 1))
    h = backbone_forward(params, Tensor(x)).values
    assert np.all(h == h[0])


def test_hand_computed_relu_net():
    params = BackboneParams(
        [Tensor([[1.0, -1.0], [2.0, 0.5]], True), Tensor([[1.0], [2.0]], True)],
        [Tensor([0.0, -1.0], True), Tensor([0.5], True)],
        "relu",
    )
    # x=[1,1]: pre=[3,-1.5] -> relu [3,0] -> 3.5 ; x=[-1,2]: pre=[3,1] -> 3+2+0.5 = 5.5
    h = backbone_forward(params, Tensor([[1.0, 1.0], [-1.0, 2.0]])).values
    np.testing.assert_array_equal(h, [[3.5], [5.5]])


def test_shape_mismatch():
    params = backbone_init(BackboneConfig(input_dim=3, feature_dim=2))
    with pytest.raises(ShapeError):
        backbone_forward(params, Tensor(np.ones((2, 4))))


def test_row_permutation_equivariance(rng):
    params = backbone_init(BackboneConfig(input_dim=4, feature_dim=3, hidden_dims=(6,), activation="tanh", seed=5))
    x = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    h = backbone_forward(params, Tensor(x)).values
    np.testing.assert_array_equal(backbone_forward(params, Tensor(x[perm])).values, h[perm])


@pytest.mark.parametrize("activation", ["relu", "tanh"])
def test_gradients_match_finite_differences(activation, rng):
    params = backbone_init(BackboneConfig(input_dim=3, feature_dim=4, hidden_dims=(5, 3), activation=activation, seed=11))
    x = Tensor(rng.uniform(-2, 2, size=(4, 3)))

    def loss():
        return mean(row_squared_norms(backbone_forward(params, x)))

    with ComputationTape() as tape:
        out = loss()
    backward(out, tape, params.parameters())
    for p in params.parameters():
        assert rel_err(p.grad, numeric_grad(lambda: loss().item(), p)) < 1e-4
