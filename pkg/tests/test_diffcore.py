import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from gatnerf import diffcore as dc


def t64(x, grad=True):
    return dc.Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


class TestTensor:
    def test_default_precision_is_32_bit(self):
        assert dc.Tensor([1.0, 2.0]).dtype == np.float32

    def test_precision_context(self):
        with dc.default_dtype(np.float64):
            assert dc.Tensor([1.0]).dtype == np.float64
        assert dc.Tensor([1.0]).dtype == np.float32

    def test_grad_absent_initially(self):
        assert t64([1.0, 2.0]).grad is None

    def test_grad_shape_matches(self):
        x = t64(np.ones((2, 3)))
        dc.backward(dc.sum(dc.mul(x, x)))
        assert x.grad.shape == x.shape

    def test_accumulation_is_additive(self):
        x = t64([1.0, 2.0, 3.0])
        dc.backward(dc.square_norm(x))
        dc.backward(dc.square_norm(x))
        np.testing.assert_array_equal(x.grad, [4.0, 8.0, 12.0])


class TestMatmul:
    def test_identity(self):
        out = dc.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_projector(self):
        out = dc.matmul(t64([[1, 0], [0, 0]]), t64([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])

    def test_gradient_of_sum_is_row_broadcast_of_column_sums(self, rng):
        a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
        dc.backward(dc.sum(dc.matmul(a, b)))
        np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)), atol=1e-12)

    def test_central_differences(self, rng):
        a, b = t64(rng.normal(size=(3, 4))), t64(rng.normal(size=(4, 2)))
        err = dc.gradient_check(lambda: dc.sum(dc.matmul(a, b)), [a, b])
        assert err < 1e-8

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(dc.DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
            dc.matmul(t64(np.ones((3, 4))), t64(np.ones((5, 2))))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(dc.relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        x = t64([-1.0, 0.0, 2.0])
        dc.backward(dc.sum(dc.relu(x)))
        np.testing.assert_array_equal(x.grad, [0, 0, 1])

    def test_softmax_single_element(self):
        np.testing.assert_array_equal(dc.softmax(t64([[3.7]]), axis=-1).data, [[1.0]])

    def test_softmax_empty_axis_rejected(self):
        with pytest.raises(dc.DimensionError):
            dc.softmax(t64(np.ones((2, 0))), axis=-1)

    def test_sigmoid_zero(self):
        assert dc.sigmoid(t64([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = dc.sigmoid(t64([-800.0, 800.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_add_shape_mismatch(self):
        with pytest.raises(dc.DimensionError):
            dc.add(t64(np.ones((2, 3))), t64(np.ones((4,))))

    def test_mean(self):
        x = t64(np.arange(6.0).reshape(2, 3))
        np.testing.assert_allclose(dc.mean(x, axis=1).data, [1.0, 4.0])

    def test_slice_fancy_index_accumulates(self):
        x = t64([1.0, 2.0, 3.0])
        dc.backward(dc.sum(dc.getitem(x, [0, 0, 2])))
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_linear_zero_upstream_gives_zero_grads(self):
        x, w, b = t64(np.ones((2, 3))), t64(np.ones((3, 2))), t64(np.ones(2))
        out = dc.linear(x, w, b)
        dc.backward(dc.sum(dc.mul(out, 0.0)))
        for p in (x, w, b):
            np.testing.assert_array_equal(p.grad, 0.0)

    def test_linear_relu_matches_composition(self, rng):
        x, w, b = t64(rng.normal(size=(5, 3))), t64(rng.normal(size=(3, 4))), t64(rng.normal(size=4))
        fused = dc.linear(x, w, b, relu=True).data
        np.testing.assert_array_equal(fused, np.maximum(x.data @ w.data + b.data, 0))


class TestLinearCat:
    def _case(self, rng):
        parts = [t64(rng.normal(size=(6, 3))), t64(rng.normal(size=(1, 2))), t64(rng.normal(size=(6, 4)))]
        w, b = t64(rng.normal(size=(9, 5))), t64(rng.normal(size=5))
        proj = rng.normal(size=(6, 5))
        return parts, w, b, proj

    @pytest.mark.parametrize("relu", [False, True])
    def test_matches_concat_then_linear(self, rng, relu):
        parts, w, b, proj = self._case(rng)
        out = dc.linear_cat(parts, w, b, relu=relu)
        dc.backward(dc.sum(dc.mul(out, proj)))
        got = [p.grad.copy() for p in (*parts, w, b)]
        for p in (*parts, w, b):
            p.grad = None
        tiled = [parts[0], dc.expand(parts[1], (6, 2)), parts[2]]
        ref = dc.linear(dc.concat(tiled, axis=-1), w, b, relu=relu)
        dc.backward(dc.sum(dc.mul(ref, proj)))
        np.testing.assert_allclose(out.data, ref.data, rtol=1e-12, atol=1e-12)
        for g, p in zip(got, (*parts, w, b)):
            np.testing.assert_allclose(g, p.grad, rtol=1e-12, atol=1e-12)

    def test_width_mismatch(self, rng):
        with pytest.raises(dc.DimensionError):
            dc.linear_cat([t64(np.zeros((2, 3)))], t64(np.zeros((4, 2))))

    def test_batch_mismatch(self):
        with pytest.raises(dc.DimensionError):
            dc.linear_cat([t64(np.zeros((2, 3))), t64(np.zeros((3, 1)))], t64(np.zeros((4, 2))))

    def test_constant_parts_get_no_gradient(self, rng):
        x = dc.Tensor(rng.normal(size=(4, 3)), dtype=np.float64)
        row = t64(rng.normal(size=(1, 2)))
        w = t64(rng.normal(size=(5, 2)))
        dc.backward(dc.sum(dc.linear_cat([x, row], w)))
        assert x.grad is None
        np.testing.assert_allclose(row.grad[0], w.data[3:].sum(axis=1) * 4)


class TestLayernorm:
    def test_constant_row_maps_to_zero(self):
        out = dc.layernorm(t64([[1.0, 1.0, 1.0, 1.0]]), t64(np.ones(4)), t64(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_standardized_input_unchanged(self):
        out = dc.layernorm(t64([[-1.0, 1.0]]), t64(np.ones(2)), t64(np.zeros(2)), eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-10)

    def test_output_statistics(self, rng):
        out = dc.layernorm(t64(rng.normal(size=(1, 8)) * 3 + 2), t64(np.ones(8)), t64(np.zeros(8)), eps=1e-5).data
        assert abs(out.mean()) < 1e-6
        assert abs(out.var() - 1.0) < 1e-4

    def test_single_feature_rejected(self):
        with pytest.raises(dc.DimensionError):
            dc.layernorm(t64([[1.0]]), t64([1.0]), t64([0.0]))

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ValueError):
            dc.layernorm(t64([[1.0, 2.0]]), t64([1.0, 1.0]), t64([0.0, 0.0]), eps=0.0)

    def test_gradient_check(self, rng):
        x, g, b = t64(rng.normal(size=(3, 6))), t64(rng.normal(size=6)), t64(rng.normal(size=6))
        proj = rng.normal(size=(3, 6))
        err = dc.gradient_check(lambda: dc.sum(dc.mul(dc.layernorm(x, g, b), proj)), [x, g, b])
        assert err < 1e-5


class TestBackward:
    def test_sum(self):
        x = t64([1.0, 2.0, 3.0])
        dc.backward(dc.sum(x))
        np.testing.assert_array_equal(x.grad, [1, 1, 1])

    def test_sum_of_squares(self):
        x = t64([1.0, 2.0, 3.0])
        dc.backward(dc.sum(dc.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2, 4, 6])

    def test_nonscalar_rejected(self):
        x = t64([1.0, 2.0])
        with pytest.raises(dc.GraphError):
            dc.backward(dc.mul(x, 2.0))

    def test_detached_rejected(self):
        with pytest.raises(dc.GraphError):
            dc.backward(t64(3.0, grad=False))

    def test_tape_cleared_unless_retained(self):
        x = t64([1.0, 2.0])
        loss = dc.sum(dc.mul(x, x))
        dc.backward(loss, retain_graph=True)
        assert len(dc.current_graph()) > 0
        dc.backward(loss)
        assert len(dc.current_graph()) == 0
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])

    def test_reverse_execution_order(self):
        order = []
        x = t64([1.0])
        a = dc.record("first", x.data * 2, (x,), lambda g: (order.append("first") or g * 2,))
        b = dc.record("second", a.data + 1, (a,), lambda g: (order.append("second") or g,))
        dc.backward(dc.sum(b))
        assert order == ["second", "first"]

    def test_no_grad_records_nothing(self):
        x = t64([1.0])
        with dc.no_grad():
            y = dc.mul(x, 2.0)
        assert not y.requires_grad and len(dc.current_graph()) == 0


class TestGradientCheck:
    def test_relu_of_linear_map(self, rng):
        w = t64(rng.normal(size=(4, 3)) * 0.1)
        x = rng.normal(size=(3, 5))
        pre = w.data @ x
        assume_away = np.min(np.abs(pre))
        assert assume_away > 1e-3
        assert dc.gradient_check(lambda: dc.sum(dc.relu(dc.matmul(w, x))), [w]) < 1e-6

    def test_constant_function(self):
        w = t64([1.0, 2.0])
        assert dc.gradient_check(lambda: dc.Tensor(np.float64(3.0), dtype=np.float64), [w]) == 0.0

    def test_rejects_32_bit(self):
        w = dc.Tensor([1.0], requires_grad=True)
        with pytest.raises(ValueError):
            dc.gradient_check(lambda: dc.sum(w), [w])

    def test_detects_corrupted_adjoint(self, rng):
        x = t64(rng.normal(size=(3, 4)))
        with dc.fault_injection("exp", lambda gs: tuple(g * 1.5 for g in gs)):
            err = dc.gradient_check(lambda: dc.sum(dc.exp(x)), [x])
        assert err > 1e-2


finite = st.floats(-5, 5, allow_nan=False, width=64)


class TestProperties:
    @given(arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50))
    def test_softmax_normalized_and_shift_invariant(self, x, c):
        s1 = dc.softmax(t64(x), axis=-1).data
        s2 = dc.softmax(t64(x + c), axis=-1).data
        np.testing.assert_allclose(s1.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (2, 5), elements=finite))
    def test_concat_backward_splits_upstream(self, a, b):
        ta, tb = t64(a), t64(b)
        up = np.arange(16.0).reshape(2, 8)
        dc.backward(dc.sum(dc.mul(dc.concat([ta, tb], axis=-1), up)))
        np.testing.assert_array_equal(np.concatenate([ta.grad, tb.grad], axis=-1), up)

    @given(arrays(np.float64, (4, 3), elements=finite))
    def test_deterministic_replay(self, x):
        def run():
            t = t64(x)
            out = dc.layernorm(dc.exp(dc.mul(t, 0.3)), t64(np.ones(3)), t64(np.zeros(3)))
            return dc.softmax(out, axis=-1).data

        np.testing.assert_array_equal(run(), run())

    @given(arrays(np.float64, (3, 5), elements=st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3)))
    def test_relu_gradient_check_away_from_kinks(self, x):
        t = t64(x)
        proj = np.linspace(-1, 1, 15).reshape(3, 5)
        assert dc.gradient_check(lambda: dc.sum(dc.mul(dc.relu(t), proj)), [t]) < 1e-4
