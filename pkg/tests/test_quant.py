import numpy as np
import pytest

from services.errors import QuantizationError
from services.numvec import TensorLayout, flat_layout
from services.quant import (
    FP16_MAX,
    QuantizedTensor,
    QuantizedUpdate,
    QuantMode,
    dequant,
    layout_bytes,
    pack_nibbles,
    quant,
    quant_error_bound,
    quantized_bytes,
    round_half_away,
    unpack_nibbles,
)

MODES = list(QuantMode)


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away(np.array([-2.5, -0.5, 0.5, 1.5, 2.4])), [-3, -1, 1, 2, 2])


def test_int8_zero_tensor():
    q = quant(np.zeros(3), flat_layout(3), QuantMode.INT8)
    t = q.tensors[0]
    assert t.scale == 1.0
    np.testing.assert_array_equal(t.data, [0, 0, 0])


def test_int8_hand_example():
    q = quant(np.array([1.0, -0.5, 0.0]), flat_layout(3), QuantMode.INT8)
    t = q.tensors[0]
    assert t.scale == pytest.approx(1 / 127)
    np.testing.assert_array_equal(t.data, [127, -64, 0])
    np.testing.assert_allclose(dequant(q), [1.0, -64 / 127, 0.0], rtol=1e-12)


def test_int4_hand_example():
    q = quant(np.array([0.7, -0.7]), flat_layout(2), QuantMode.INT4)
    t = q.tensors[0]
    assert t.scale == pytest.approx(0.1)
    assert t.data.tolist() == [241]
    np.testing.assert_allclose(dequant(q), [0.7, -0.7], atol=1e-12)


def test_int4_odd_length_pads_low_nibble():
    q = quant(np.array([0.7, -0.7, 0.0]), flat_layout(3), QuantMode.INT4)
    # nibbles 15, 1, 8 then pad 0
    assert q.tensors[0].data.tolist() == [0xF1, 0x80]
    np.testing.assert_allclose(dequant(q), [0.7, -0.7, 0.0], atol=1e-12)


def test_nibble_pack_is_bijective(rng):
    for n in (1, 2, 7, 64):
        nib = rng.integers(0, 16, size=n).astype(np.uint8)
        packed = pack_nibbles(nib)
        assert packed.size == (n + 1) // 2
        np.testing.assert_array_equal(unpack_nibbles(packed, n), nib)


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.value)
def test_zeros_round_trip_exactly(mode):
    layout = TensorLayout(shapes=((2, 3), (4,)))
    np.testing.assert_array_equal(dequant(quant(np.zeros(10), layout, mode)), np.zeros(10))


def test_fp32_is_identity(rng):
    x = rng.standard_normal(17)
    np.testing.assert_array_equal(dequant(quant(x, flat_layout(17), QuantMode.FP32)), x)


@pytest.mark.parametrize("mode", MODES, ids=lambda m: m.value)
def test_round_trip_within_bound(mode, rng):
    layout = TensorLayout(shapes=((3, 4), (5,)))
    for _ in range(1000):
        magnitude = 10.0 ** rng.uniform(-12, 5)
        x = rng.standard_normal(layout.size) * magnitude
        back = dequant(quant(x, layout, mode))
        bounds = quant_error_bound(x, layout, mode)
        for part, part_back, bound in zip(layout.split(x), layout.split(back), bounds):
            assert np.max(np.abs(part_back - part)) <= bound * (1 + 1e-12) + 1e-300


def test_fp16_error_within_relative_bound_for_normal_range_peaks(rng):
    layout = TensorLayout(shapes=((3, 4), (5,)))
    for _ in range(1000):
        x = rng.standard_normal(layout.size) * 10.0 ** rng.uniform(-3, 3.5)
        back = dequant(quant(x, layout, QuantMode.FP16))
        for part, part_back in zip(layout.split(x), layout.split(back)):
            peak = np.max(np.abs(part))
            if 2.0 ** -14 <= peak <= FP16_MAX:
                assert np.max(np.abs(part_back - part)) <= peak * 2.0 ** -11


def test_grid_values_round_trip():
    ints = np.array([127, -127, 3, -5, 0, 64, -64, 1, -1])
    # peak 31.75 gives scale exactly 0.25
    x = ints * 0.25
    q = quant(x, flat_layout(9), QuantMode.INT8)
    assert q.tensors[0].scale == 0.25
    np.testing.assert_array_equal(dequant(q), x)

    nib_ints = np.array([7, -7, 2, 0, -3])
    x4 = nib_ints * 0.5
    np.testing.assert_array_equal(dequant(quant(x4, flat_layout(5), QuantMode.INT4)), x4)


def test_fp16_saturates():
    x = np.array([1e6, -1e6, 1.0])
    q = quant(x, flat_layout(3), QuantMode.FP16)
    assert q.saturated == 2
    np.testing.assert_array_equal(dequant(q), [FP16_MAX, -FP16_MAX, 1.0])


def test_fp16_saturation_is_logged_as_warning(caplog):
    with caplog.at_level("WARNING", logger="services.quant"):
        quant(np.array([7e4, 0.5]), flat_layout(2), QuantMode.FP16)
    assert any(r.levelname == "WARNING" and "saturated 1" in r.getMessage() for r in caplog.records)


def test_non_finite_input_names_tensor():
    layout = TensorLayout(shapes=((2,), (2,)))
    with pytest.raises(QuantizationError) as info:
        quant(np.array([0.0, 1.0, np.inf, 2.0]), layout, QuantMode.INT8)
    assert info.value.tensor_index == 1


def test_dequant_rejects_inconsistent_payload():
    bad = QuantizedUpdate(QuantMode.INT4, (QuantizedTensor(QuantMode.INT4, np.zeros(3, dtype=np.uint8), 1.0, (4,)),))
    with pytest.raises(QuantizationError):
        dequant(bad)


def test_error_bound_example():
    x = np.zeros(10)
    x[0] = 1.27
    assert quant_error_bound(x, flat_layout(10), QuantMode.INT8)[0] == pytest.approx(0.005)


@pytest.mark.parametrize("mode,expected", [
    (QuantMode.FP32, 4000),
    (QuantMode.FP16, 2000),
    (QuantMode.INT8, 1008),
    (QuantMode.INT4, 512),
])
def test_byte_accounting(mode, expected, rng):
    layout = flat_layout(1000)
    q = quant(rng.standard_normal(1000), layout, mode)
    assert quantized_bytes(q) == expected
    assert layout_bytes(layout, mode) == expected
