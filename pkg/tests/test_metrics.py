import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mslcl.autodiff import Tensor
from mslcl.heads import LinearHead
from mslcl.backbone import BackboneParams
from mslcl.metrics import (
    AccuracyMatrix,
    MissingEntryError,
    average_accuracy,
    backward_transfer,
    evaluate_accuracy,
    exact_mean,
    predict,
)
from mslcl.model import Model

WORKED = [[0.9, 0.8], [None, 0.7]]


def test_worked_example_exact():
    # A = (0.8 + 0.7) / 2 ; BW = ((0.9 - 0.8) + (0.7 - 0.7)) / 2
    assert average_accuracy(WORKED) == 0.75
    assert backward_transfer(WORKED) == 0.05


def test_three_task_example_exact():
    rows = [[0.9, 0.85, 0.8], [None, 0.7, 0.65], [None, None, 0.8]]
    assert average_accuracy(rows) == 0.75
    assert backward_transfer(rows) == 0.05


def test_negative_transfer_when_accuracy_improves():
    m = [[0.5, 0.9], [None, 0.8]]
    assert backward_transfer(m) == pytest.approx(-0.2, abs=1e-15)


def test_single_task():
    assert average_accuracy([[0.3]]) == 0.3
    assert backward_transfer([[0.3]]) == 0


def test_missing_entry():
    with pytest.raises(MissingEntryError, match="task 2"):
        average_accuracy([[0.9, 0.8], [None, None]])
    with pytest.raises(MissingEntryError):
        backward_transfer([[None, 0.8], [None, 0.7]])


def test_record_rules():
    m = AccuracyMatrix(2)
    with pytest.raises(ValueError):
        m.record(1, 0, 0.5)
    with pytest.raises(ValueError):
        m.record(0, 0, 1.5)
    m.record(0, 0, 0.5)
    assert m.to_rows() == [[0.5, None], [None, None]]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 6), st.data())
def test_final_column_gain_lowers_transfer(q, data):
    rows = [[data.draw(st.floats(0, 1)) if j >= t else None for j in range(q)] for t in range(q)]
    t = data.draw(st.integers(0, q - 1))
    bump = data.draw(st.floats(0, 1))
    rows2 = [list(r) for r in rows]
    rows2[t][q - 1] = min(1.0, rows[t][q - 1] + bump)
    assert average_accuracy(rows2) >= average_accuracy(rows)
    if t < q - 1:
        assert backward_transfer(rows2) <= backward_transfer(rows)


def test_exact_mean():
    assert exact_mean([0.1, 0.2]) == 0.15
    with pytest.raises(ValueError):
        exact_mean([])


def test_predict_ties_lowest_index():
    np.testing.assert_array_equal(predict(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]])), [0, 1])


def identity_linear_model(C):
    head = LinearHead(C)
    for c in range(C):
        head.weights.append(Tensor(np.eye(C)[c], True))
    return Model(BackboneParams([Tensor(np.eye(C), True)], [Tensor(np.zeros(C), True)]), head)


def test_evaluate_accuracy_hand_example():
    model = identity_linear_model(2)
    X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [2.0, 1.0]])
    assert evaluate_accuracy(model, X, [0, 1, 1, 0]) == 0.75


def test_evaluate_accuracy_errors():
    model = identity_linear_model(2)
    with pytest.raises(ValueError, match="empty"):
        evaluate_accuracy(model, np.zeros((0, 2)), [])
    with pytest.raises(ValueError):
        evaluate_accuracy(model, np.zeros((1, 2)), [2])
