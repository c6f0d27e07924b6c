from itertools import combinations

import numpy as np
import pytest

from services.aggregator import (
    StateTable,
    Strategy,
    compute_r,
    fp32_reference_bytes,
    memory_ratio,
    pseudo_gradient,
    server_round,
    table_bytes,
    table_payload_bytes,
    update_table,
)
from services.errors import StrategyError, UnknownClientError
from services.numvec import TensorLayout, flat_layout
from services.quant import QuantMode, dequant, quant, quant_error_bound
from services.server_opt import OptimizerHyper, init_state

ADAGRAD = OptimizerHyper(kind="adagrad", eta_s=0.1)


def _table_with(slots, weights=None):
    table = StateTable.dense(len(slots), len(slots[0]), weights)
    update_table(table, {i: np.asarray(s, dtype=float) for i, s in enumerate(slots)})
    return table


def test_zero_table_single_client_returns_g():
    table = StateTable.dense(3, 2)
    g = np.array([1.5, -2.0])
    np.testing.assert_array_equal(compute_r({1: g}, table), g)


def test_hand_example_unbiased():
    table = _table_with([[2.0], [4.0]])
    r = compute_r({0: np.array([6.0])}, table, "unbiased")
    np.testing.assert_allclose(r, [7.0])


def test_client_weighted_correction_uses_p():
    table = _table_with([[2.0], [4.0]])
    r = compute_r({0: np.array([6.0])}, table, "client-weighted")
    # 0.5 * (6 - 2) + 3
    np.testing.assert_allclose(r, [5.0])


def test_full_participation_collapses_to_mean(rng):
    N, d = 5, 4
    table = _table_with(rng.standard_normal((N, d)))
    g = {i: rng.standard_normal(d) for i in range(N)}
    r = compute_r(g, table, "unbiased")
    np.testing.assert_allclose(r, np.mean([g[i] for i in range(N)], axis=0), atol=1e-12)


@pytest.mark.parametrize("N,M", [(2, 1), (4, 2), (5, 3), (6, 2), (6, 6)])
def test_unbiased_over_all_subsets(N, M, rng):
    d = 3
    table = _table_with(rng.standard_normal((N, d)))
    g = rng.standard_normal((N, d))
    rs = [compute_r({i: g[i] for i in subset}, table, "unbiased") for subset in combinations(range(N), M)]
    np.testing.assert_allclose(np.mean(rs, axis=0), g.mean(axis=0), atol=1e-12)


def test_unknown_client_rejected():
    table = StateTable.dense(2, 1)
    with pytest.raises(UnknownClientError):
        compute_r({2: np.zeros(1)}, table)
    with pytest.raises(StrategyError):
        compute_r({}, table)


def test_pseudo_gradient():
    np.testing.assert_allclose(pseudo_gradient(np.array([7.0]), 0.1), [0.7])
    np.testing.assert_array_equal(pseudo_gradient(np.zeros(2), 0.5), np.zeros(2))


def test_update_table_touches_only_participants():
    table = _table_with([[1.0], [2.0], [3.0]])
    snapshot = table.copy()
    update_table(table, {})
    np.testing.assert_array_equal(table.cached_sum, snapshot.cached_sum)
    update_table(table, {1: np.array([5.0])})
    np.testing.assert_array_equal(table.deref(0), [1.0])
    np.testing.assert_array_equal(table.deref(1), [5.0])
    np.testing.assert_array_equal(snapshot.deref(1), [2.0])
    np.testing.assert_allclose(table.cached_sum, [3.0])


@pytest.mark.parametrize("mode", [QuantMode.FP32, QuantMode.FP16, QuantMode.INT8, QuantMode.INT4], ids=lambda m: m.value)
def test_cached_sum_stays_consistent(mode, rng):
    layout = TensorLayout(shapes=((2, 3), (2,)))
    N = 7
    table = StateTable(N, layout, mode)
    for _ in range(100):
        chosen = rng.choice(N, size=3, replace=False)
        update_table(table, {int(i): rng.standard_normal(layout.size) for i in chosen})
    np.testing.assert_allclose(table.cached_sum, table.recompute_sum(), atol=1e-9)


def test_quantized_slot_within_bound(rng):
    layout = flat_layout(20)
    table = StateTable(2, layout, QuantMode.INT8)
    g = rng.standard_normal(20)
    update_table(table, {0: g})
    bound = quant_error_bound(g, layout, QuantMode.INT8)[0]
    assert np.max(np.abs(table.deref(0) - g)) <= bound * (1 + 1e-12)
    np.testing.assert_array_equal(table.deref(0), dequant(quant(g, layout, QuantMode.INT8)))


def test_weights_must_sum_to_one():
    with pytest.raises(StrategyError):
        StateTable.dense(2, 1, weights=np.array([0.5, 0.6]))
    with pytest.raises(StrategyError):
        StateTable.dense(2, 1, weights=np.array([1.0, 0.0]))


def test_strategy_compatibility():
    with pytest.raises(StrategyError):
        Strategy("fedadavr")
    with pytest.raises(StrategyError):
        Strategy("fedavg", optimizer=ADAGRAD)
    with pytest.raises(StrategyError):
        Strategy("fedadavr_quant", optimizer=ADAGRAD)
    with pytest.raises(StrategyError):
        Strategy("fedadavr", optimizer=ADAGRAD, mode=QuantMode.INT8)
    with pytest.raises(StrategyError):
        Strategy("scaffold")
    assert Strategy("fedadavr_quant", optimizer=ADAGRAD, mode="int4").mode is QuantMode.INT4


def test_fedadavr_full_participation_matches_novr(rng):
    N, d = 4, 6
    w = rng.standard_normal(d)
    received = {i: rng.standard_normal(d) for i in range(N)}
    vr = server_round(Strategy("fedadavr", optimizer=ADAGRAD), w, received, StateTable.dense(N, d),
                      init_state(d, ADAGRAD), 0.05)
    novr = server_round(Strategy("fedopt_novr", optimizer=ADAGRAD), w, received, None, init_state(d, ADAGRAD), 0.05)
    np.testing.assert_array_equal(vr.w, novr.w)


def test_fedavg_single_client_moves_to_local_model():
    w = np.array([1.0, -1.0])
    w_local = np.array([0.4, 0.2])
    eta_c = 0.1
    g = (w - w_local) / eta_c
    out = server_round(Strategy("fedavg"), w, {0: g}, None, None, eta_c)
    np.testing.assert_allclose(out.w, w_local, atol=1e-12)
    assert out.table is None


def test_mifa_with_equal_slots_matches_fedavg(rng):
    N, d = 3, 4
    g = rng.standard_normal(d)
    w = rng.standard_normal(d)
    received = {i: g.copy() for i in range(N)}
    mifa = server_round(Strategy("mifa", server_lr=0.5), w, received, StateTable.dense(N, d), None, 0.2)
    avg = server_round(Strategy("fedavg", server_lr=0.5), w, received, None, None, 0.2)
    np.testing.assert_allclose(mifa.w, avg.w, atol=1e-14)


def test_table_updated_after_model_step():
    # r must use the previous round's y, not this round's g
    N, d = 2, 1
    table = _table_with([[2.0], [4.0]])
    strategy = Strategy("fedadavr_noopt", server_lr=1.0)
    out = server_round(strategy, np.zeros(d), {0: np.array([6.0])}, table, None, 1.0)
    np.testing.assert_allclose(out.w, [-7.0])
    np.testing.assert_array_equal(out.table.deref(0), [6.0])
    np.testing.assert_allclose(out.table.cached_sum, [5.0])


def test_fedvarp_eta_c_scaling():
    table = _table_with([[2.0], [4.0]])
    scaled = server_round(Strategy("fedvarp", server_lr=0.5), np.zeros(1), {0: np.array([6.0])}, table.copy(),
                          None, 0.1)
    unscaled = server_round(Strategy("fedvarp", server_lr=0.5, fedvarp_scale_by_eta_c=False), np.zeros(1),
                            {0: np.array([6.0])}, table.copy(), None, 0.1)
    np.testing.assert_allclose(scaled.w, [-0.35])
    np.testing.assert_allclose(unscaled.w, [-3.5])


@pytest.mark.parametrize("kind", ["fedavg", "fedopt_novr", "mifa", "fedvarp", "fedadavr", "fedadavr_quant",
                                  "fedadavr_noopt"])
def test_zero_updates_leave_model_fixed(kind, rng):
    N, d = 3, 5
    w = rng.standard_normal(d)
    needs_opt = kind in ("fedopt_novr", "fedadavr", "fedadavr_quant")
    mode = QuantMode.INT8 if kind == "fedadavr_quant" else QuantMode.FP32
    strategy = Strategy(kind, optimizer=ADAGRAD if needs_opt else None, mode=mode)
    table = StateTable(N, flat_layout(d), mode) if strategy.uses_table else None
    state = init_state(d, ADAGRAD) if needs_opt else None
    out = server_round(strategy, w, {0: np.zeros(d), 2: np.zeros(d)}, table, state, 0.1)
    np.testing.assert_array_equal(out.w, w)


def test_missing_table_or_state_rejected():
    with pytest.raises(StrategyError):
        server_round(Strategy("mifa"), np.zeros(1), {0: np.zeros(1)}, None, None, 0.1)
    with pytest.raises(StrategyError):
        server_round(Strategy("fedadavr", optimizer=ADAGRAD), np.zeros(1), {0: np.zeros(1)},
                     StateTable.dense(1, 1), None, 0.1)


def test_table_byte_accounting(rng):
    N, d = 10, 1000
    table = StateTable(N, flat_layout(d), QuantMode.INT8)
    assert table_bytes(table) == N
    update_table(table, {i: rng.standard_normal(d) for i in range(N)})
    assert table_payload_bytes(table) == 10 * 1008
    assert fp32_reference_bytes(table) == 4 * d * N
    assert memory_ratio(table) == pytest.approx(0.252)
    assert table_bytes(table) == 10 * 1008 + N
    fp16 = StateTable(N, flat_layout(d), QuantMode.FP16)
    update_table(fp16, {i: rng.standard_normal(d) for i in range(N)})
    assert memory_ratio(fp16) == 0.5
    assert table_bytes(None) == 0


def test_legacy_weighting_alias_resolves_to_client_weighted():
    strategy = Strategy("fedvarp", weighting="paper-literal")
    assert strategy.weighting == "client-weighted"
    table = _table_with([[2.0], [4.0]])
    np.testing.assert_array_equal(compute_r({0: np.array([6.0])}, table, "paper-literal"),
                                  compute_r({0: np.array([6.0])}, table, "client-weighted"))


def test_unknown_weighting_lists_accepted_names():
    with pytest.raises(StrategyError, match="paper-literal"):
        Strategy("fedvarp", weighting="sized")
    with pytest.raises(StrategyError):
        compute_r({0: np.zeros(1)}, StateTable.dense(1, 1), "sized")
