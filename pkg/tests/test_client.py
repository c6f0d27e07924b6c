import numpy as np
import pytest

from services.client import ClientConfig, device_update, local_steps, local_train, minibatch_schedule
from services.errors import LocalTrainingError, ModelInputError
from services.models import Batch, ModelSpec, loss_and_grad, parameter_count


def test_quadratic_two_steps(quad_spec, origin_batch):
    cfg = ClientConfig(eta_c=0.1, K=2, batch_size=1, momentum=0.0)
    g = device_update(quad_spec, origin_batch, np.array([1.0]), cfg, np.random.default_rng(0))
    # w1 = 0.9, w2 = 0.81
    assert g[0] == pytest.approx(1.9, rel=1e-12)


def test_single_step_is_exact_gradient(rng):
    spec = ModelSpec(kind="linear-softmax", input_dim=3, num_classes=2)
    batch = Batch(rng.standard_normal((5, 3)), rng.integers(0, 2, size=5))
    w = rng.standard_normal(parameter_count(spec))
    cfg = ClientConfig(eta_c=0.37, K=1, batch_size=10, momentum=0.0)
    g = device_update(spec, batch, w, cfg, np.random.default_rng(1))
    _, grad = loss_and_grad(spec, w, batch)
    np.testing.assert_allclose(g, grad, rtol=1e-10, atol=1e-14)


def test_full_batch_sum_of_gradients(rng):
    spec = ModelSpec(kind="linear-softmax", input_dim=3, num_classes=3)
    batch = Batch(rng.standard_normal((6, 3)), rng.integers(0, 3, size=6))
    w0 = rng.standard_normal(parameter_count(spec))
    cfg = ClientConfig(eta_c=0.05, K=4, batch_size=6, momentum=0.0)
    g = device_update(spec, batch, w0, cfg, np.random.default_rng(2))
    w = w0.copy()
    total = np.zeros_like(w)
    for _ in range(4):
        _, grad = loss_and_grad(spec, w, batch)
        total += grad
        w = w - 0.05 * grad
    np.testing.assert_allclose(g, total, rtol=1e-10, atol=1e-12)


def test_return_identity_with_momentum(rng):
    spec = ModelSpec(kind="linear-softmax", input_dim=3, num_classes=3)
    batch = Batch(rng.standard_normal((9, 3)), rng.integers(0, 3, size=9))
    w = rng.standard_normal(parameter_count(spec))
    before = w.copy()
    cfg = ClientConfig(eta_c=0.1, K=5, batch_size=4, momentum=0.9)
    update = local_train(spec, batch, w, cfg, np.random.default_rng(3))
    np.testing.assert_array_equal(w, before)
    assert update.steps == 5
    assert update.num_examples == 9
    assert np.isfinite(update.final_loss)


def test_same_stream_same_update(rng):
    spec = ModelSpec(kind="linear-softmax", input_dim=3, num_classes=3)
    batch = Batch(rng.standard_normal((9, 3)), rng.integers(0, 3, size=9))
    w = np.zeros(parameter_count(spec))
    cfg = ClientConfig(eta_c=0.1, K=3, batch_size=2, momentum=0.9)
    a = device_update(spec, batch, w, cfg, np.random.default_rng(4))
    b = device_update(spec, batch, w, cfg, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_schedule_one_epoch_covers_all():
    schedule = minibatch_schedule(4, 2, 2, np.random.default_rng(0))
    assert len(schedule) == 2
    assert sorted(np.concatenate(schedule).tolist()) == [0, 1, 2, 3]


def test_schedule_keeps_short_batch_and_reshuffles():
    schedule = minibatch_schedule(5, 2, 4, np.random.default_rng(0))
    assert [len(b) for b in schedule] == [2, 2, 1, 2]
    assert sorted(np.concatenate(schedule[:3]).tolist()) == [0, 1, 2, 3, 4]


def test_schedule_full_batch():
    schedule = minibatch_schedule(3, 10, 3, np.random.default_rng(0))
    for batch in schedule:
        assert sorted(batch.tolist()) == [0, 1, 2]


def test_local_steps_epochs_mapping():
    cfg = ClientConfig(batch_size=20, epochs_mode="epochs", epochs=3)
    assert local_steps(cfg, 45) == 3 * 3
    assert local_steps(ClientConfig(K=7), 45) == 7


def test_diverging_client_reports_step(quad_spec):
    batch = Batch(np.array([[1e200]]), np.array([0]))
    cfg = ClientConfig(eta_c=1e200, K=3, batch_size=1, momentum=0.0)
    with pytest.raises(LocalTrainingError) as info:
        device_update(quad_spec, batch, np.array([0.0]), cfg, np.random.default_rng(0))
    assert info.value.step >= 0


def test_config_validation():
    with pytest.raises(ModelInputError):
        ClientConfig(eta_c=0.0)
    with pytest.raises(ModelInputError):
        ClientConfig(momentum=1.0)
    with pytest.raises(ModelInputError):
        ClientConfig(K=0)
