import numpy as np
import pytest

from services.rng import TAG_CLIENT, TAG_SAMPLE, derive_seed_sequence, stream


def test_same_key_same_stream():
    a = stream(42, TAG_CLIENT, 3, 7).standard_normal(5)
    b = stream(42, TAG_CLIENT, 3, 7).standard_normal(5)
    np.testing.assert_array_equal(a, b)


def test_keys_and_tags_separate_streams():
    base = stream(42, TAG_CLIENT, 3, 7).standard_normal(5)
    assert not np.array_equal(base, stream(42, TAG_CLIENT, 3, 8).standard_normal(5))
    assert not np.array_equal(base, stream(42, TAG_SAMPLE, 3, 7).standard_normal(5))
    assert not np.array_equal(base, stream(43, TAG_CLIENT, 3, 7).standard_normal(5))


def test_negative_keys_rejected():
    with pytest.raises(ValueError):
        derive_seed_sequence(-1, TAG_CLIENT)
    with pytest.raises(ValueError):
        stream(1, TAG_CLIENT, -2)
