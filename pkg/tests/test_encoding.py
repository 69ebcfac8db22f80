import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gatnerf.encoding import encoded_width, positional_encode


class TestPositionalEncode:
    def test_origin_ten_bands(self):
        pe = positional_encode(np.zeros(3), 10)
        assert pe.shape == (63,)
        assert np.all(pe[:3] == 0)
        for k in range(10):
            np.testing.assert_array_equal(pe[3 + 6 * k: 6 + 6 * k], 0.0)
            np.testing.assert_array_equal(pe[6 + 6 * k: 9 + 6 * k], 1.0)

    def test_origin_four_bands(self):
        pe = positional_encode(np.zeros(3), 4)
        assert pe.shape == (27,)
        np.testing.assert_array_equal(pe[[6, 7, 8, 12, 13, 14]], 1.0)

    def test_component_layout(self):
        pe = positional_encode(np.array([0.5, 0.0, 0.0]), 2)
        comp0 = pe[[0, 3, 6, 9, 12]]
        np.testing.assert_allclose(comp0, [0.5, 1.0, 0.0, 0.0, -1.0], atol=1e-15)

    def test_zero_bands_is_identity(self):
        x = np.array([[0.1, -0.2, 0.3]])
        np.testing.assert_array_equal(positional_encode(x, 0), x)

    def test_without_input(self):
        assert positional_encode(np.zeros(3), 3, include_input=False).shape == (18,)
        assert encoded_width(3, include_input=False) == 18

    def test_bad_width_rejected(self):
        with pytest.raises(ValueError):
            positional_encode(np.zeros(4), 2)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            positional_encode(np.array([np.nan, 0, 0]), 2)

    def test_negative_bands_rejected(self):
        with pytest.raises(ValueError):
            positional_encode(np.zeros(3), -1)

    def test_batched(self):
        x = np.random.default_rng(0).uniform(-1, 1, size=(5, 7, 3))
        out = positional_encode(x, 3)
        assert out.shape == (5, 7, 21)
        np.testing.assert_array_equal(out[2, 4], positional_encode(x[2, 4], 3))


unit = st.floats(-1, 1, allow_nan=False)


class TestProperties:
    @given(arrays(np.float64, (3,), elements=unit), st.integers(0, 12), st.booleans())
    def test_length_and_range(self, x, bands, inc):
        pe = positional_encode(x, bands, include_input=inc)
        assert pe.shape == (3 * (1 + 2 * bands) if inc else 6 * bands,)
        trig = pe[3:] if inc else pe
        assert np.all(np.abs(trig) <= 1.0)

    @given(arrays(np.float64, (3,), elements=unit), arrays(np.float64, (3,), elements=unit), st.integers(1, 6))
    def test_injective(self, a, b, bands):
        if not np.array_equal(a, b):
            assert not np.array_equal(positional_encode(a, bands), positional_encode(b, bands))
