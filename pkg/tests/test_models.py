import math

import numpy as np
import pytest

from services.errors import DimensionError, ModelInputError
from services.models import (
    Batch,
    ModelSpec,
    finite_diff_grad,
    init_params,
    loss_and_grad,
    loss_value,
    model_layout,
    parameter_count,
    predict,
    predict_accuracy,
)

SPECS = [
    ModelSpec(kind="linear-softmax", input_dim=4, num_classes=3),
    ModelSpec(kind="mlp-1hidden", input_dim=4, num_classes=3, hidden_dim=5, activation="tanh"),
    ModelSpec(kind="mlp-1hidden", input_dim=4, num_classes=3, hidden_dim=5, activation="relu"),
    ModelSpec(kind="quadratic", input_dim=4),
]


def _batch(rng, n=6, dim=4, classes=3):
    return Batch(rng.standard_normal((n, dim)), rng.integers(0, classes, size=n))


def test_parameter_counts():
    assert parameter_count(SPECS[0]) == 3 * 4 + 3
    assert parameter_count(SPECS[1]) == 5 * 4 + 5 + 3 * 5 + 3
    assert parameter_count(SPECS[3]) == 4
    assert model_layout(SPECS[1]).shapes == ((5, 4), (5,), (3, 5), (3,))


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
def test_gradient_matches_finite_differences(spec):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        batch = _batch(rng)
        w = 0.5 * rng.standard_normal(parameter_count(spec))
        loss, grad = loss_and_grad(spec, w, batch)
        assert loss == pytest.approx(loss_value(spec, w, batch), rel=1e-12)
        np.testing.assert_allclose(grad, finite_diff_grad(spec, w, batch), rtol=1e-5, atol=1e-8,
                                   err_msg=f"seed {seed}")


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.kind}-{s.activation}")
def test_loss_and_grad_is_deterministic(spec, rng):
    batch = _batch(rng)
    w = rng.standard_normal(parameter_count(spec))
    loss_a, grad_a = loss_and_grad(spec, w, batch)
    loss_b, grad_b = loss_and_grad(spec, w, batch)
    assert loss_a == loss_b
    np.testing.assert_array_equal(grad_a, grad_b)


def test_zero_weights_give_uniform_softmax(rng):
    spec = SPECS[0]
    batch = _batch(rng)
    w = np.zeros(parameter_count(spec))
    assert loss_value(spec, w, batch) == pytest.approx(math.log(3), abs=1e-9)
    # all logits tie, argmax picks class 0
    np.testing.assert_array_equal(predict(spec, w, batch), np.zeros(batch.size, dtype=np.int64))


def test_loss_does_not_mutate_weights(rng):
    spec = SPECS[1]
    batch = _batch(rng)
    w = rng.standard_normal(parameter_count(spec))
    before = w.copy()
    loss_and_grad(spec, w, batch)
    finite_diff_grad(spec, w, batch)
    np.testing.assert_array_equal(w, before)


def test_quadratic_loss_and_accuracy():
    spec = ModelSpec(kind="quadratic", input_dim=2)
    batch = Batch(np.array([[1.0, 0.0], [3.0, 2.0]]), np.array([0, 0]))
    w = np.array([1.0, 1.0])
    loss, grad = loss_and_grad(spec, w, batch)
    # diffs (0, 1) and (-2, -1): 0.5 * mean(1, 5)
    assert loss == pytest.approx(1.5)
    np.testing.assert_allclose(grad, [-1.0, 0.0])
    assert predict_accuracy(spec, w, batch) == 0.0


def test_separable_model_reaches_full_accuracy():
    spec = ModelSpec(kind="linear-softmax", input_dim=2, num_classes=2)
    batch = Batch(np.array([[1.0, 0.0], [2.0, 0.5], [-1.0, 0.0], [-2.0, -0.5]]), np.array([1, 1, 0, 0]))
    # logit_1 - logit_0 = 2 * x0
    w = np.array([-1.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    assert predict_accuracy(spec, w, batch) == 1.0


def test_input_errors(rng):
    spec = SPECS[0]
    batch = _batch(rng)
    with pytest.raises(DimensionError):
        loss_value(spec, np.zeros(3), batch)
    with pytest.raises(ModelInputError):
        loss_value(spec, np.zeros(15), Batch(np.ones((1, 4)), np.array([3])))
    with pytest.raises(ModelInputError):
        loss_value(spec, np.zeros(15), Batch(np.full((1, 4), np.inf), np.array([0])))
    with pytest.raises(ModelInputError):
        Batch(np.ones((2, 4)), np.array([0]))
    with pytest.raises(ModelInputError):
        ModelSpec(kind="mlp-1hidden", input_dim=4, num_classes=3, hidden_dim=0)
    with pytest.raises(ModelInputError):
        ModelSpec(kind="cnn")


def test_init_params():
    linear = SPECS[0]
    assert not np.any(init_params(linear, np.random.default_rng(0)))
    mlp = SPECS[1]
    a = init_params(mlp, np.random.default_rng(5))
    b = init_params(mlp, np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    W1 = model_layout(mlp).split(a)[0]
    assert np.all(np.abs(W1) <= 1.0 / math.sqrt(4))
