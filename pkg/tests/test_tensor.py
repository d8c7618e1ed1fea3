import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from promptcondense import tensor as T
from promptcondense.errors import ContractError, DimensionError
from promptcondense.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


class TestMatmul:
    """Matrix products and their gradients."""

    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_zero(self, rng):
        out = T.matmul(Tensor(np.zeros((2, 2))), Tensor(rng.standard_normal((2, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_backward_rules(self, rng):
        a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        g = rng.standard_normal((3, 2))
        T.backward(T.tensor_sum(T.mul(T.matmul(a, b), Tensor(g))))
        np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)

    def test_shape_mismatch_names_both(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_constant_row(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[2.0, 2.0, 2.0]])).data, [[1 / 3] * 3], atol=1e-15)

    def test_log_two(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(2.0)]])).data, [[1 / 3, 2 / 3]],
                                   atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 6))
        np.testing.assert_allclose(T.softmax_rows(Tensor(x + 7.5)).data, T.softmax_rows(Tensor(x)).data,
                                   atol=1e-12)

    def test_large_inputs_stay_finite(self):
        y = T.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]])).data
        assert np.all(np.isfinite(y))
        np.testing.assert_allclose(y[0, 0], 1.0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite))
    def test_rows_sum_to_one(self, x):
        y = T.softmax_rows(Tensor(x)).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


class TestGelu:
    def test_values(self):
        y = T.gelu(Tensor([0.0, 10.0, 1.0])).data
        assert y[0] == 0.0
        assert abs(y[1] - 10.0) < 1e-6
        assert abs(y[2] - 0.841345) < 1e-5

    def test_matches_erf_form(self, rng):
        x = rng.uniform(-4, 4, size=50)
        ref = 0.5 * x * (1.0 + np.array([math.erf(v / math.sqrt(2.0)) for v in x]))
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, atol=1e-14)


class TestLayerNorm:
    def test_constant_row(self):
        y = T.layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_two_values(self):
        y = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(y, [[1.0, -1.0]], atol=1e-5)

    def test_zero_gain_gives_bias(self, rng):
        b = rng.standard_normal(5)
        y = T.layer_norm(Tensor(rng.standard_normal((3, 5))), Tensor(np.zeros(5)), Tensor(b)).data
        np.testing.assert_array_equal(y, np.tile(b, (3, 1)))

    def test_width_one_rejected(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestCrossEntropy:
    def test_dominant_logit(self):
        assert T.cross_entropy(Tensor([[1e6, 0.0, 0.0]]), [0]).item() < 1e-9

    def test_uniform(self):
        assert abs(T.cross_entropy(Tensor(np.zeros((2, 7))), [3, 5]).item() - math.log(7)) < 1e-12

    def test_hand_value(self):
        assert abs(T.cross_entropy(Tensor([[0.0, math.log(3.0)]]), [0]).item() - 1.3863) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_reductions_agree(self, rng):
        z = Tensor(rng.standard_normal((6, 4)))
        y = rng.integers(0, 4, 6)
        per = T.cross_entropy(z, y, reduction="none").data
        np.testing.assert_allclose(T.cross_entropy(z, y, reduction="sum").item(), per.sum(), atol=1e-12)
        np.testing.assert_allclose(T.cross_entropy(z, y).item(), per.mean(), atol=1e-12)


class TestBackward:
    """Tape semantics of the reverse pass."""

    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        T.backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self, rng):
        x = Tensor(rng.standard_normal(10), requires_grad=True)
        T.backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-15)

    def test_three_op_chain_matches_differences(self, rng):
        w = Tensor(rng.standard_normal((5, 3)))

        def f(x):
            return T.cross_entropy(T.matmul(T.gelu(x), w), [0, 2, 1, 1])

        assert T.grad_check(f, Tensor(rng.uniform(-2, 2, (4, 5)))) < 1e-4

    def test_second_backward_raises(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        loss = T.tensor_sum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(T.mul(x, x))

    def test_linearity(self, rng):
        xv = rng.standard_normal((4, 6))
        w = Tensor(rng.standard_normal((6, 3)))

        def grad_of(build):
            x = Tensor(xv, requires_grad=True)
            T.backward(build(x))
            return x.grad

        l1 = lambda x: T.cross_entropy(T.matmul(x, w), [0, 1, 2, 0])
        l2 = lambda x: T.tensor_sum(T.gelu(x))
        a, b = 1.7, -0.3
        combo = grad_of(lambda x: T.add(T.scale(l1(x), a), T.scale(l2(x), b)))
        np.testing.assert_allclose(combo, a * grad_of(l1) + b * grad_of(l2), atol=1e-10)

    def test_determinism(self, rng):
        xv = rng.standard_normal((4, 6))

        def run():
            x = Tensor(xv, requires_grad=True)
            y = T.softmax_rows(T.gelu(x))
            T.backward(T.tensor_sum(T.mul(y, y)))
            return y.data, x.grad

        (y1, g1), (y2, g2) = run(), run()
        assert y1.tobytes() == y2.tobytes() and g1.tobytes() == g2.tobytes()

    def test_no_grad_records_nothing(self, rng):
        x = Tensor(rng.standard_normal(3), requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad


class TestGradCheck:
    def test_linear_is_exact(self, rng):
        w = Tensor(rng.standard_normal((4, 4)))
        assert T.grad_check(lambda x: T.tensor_sum(T.mul(x, w)), Tensor(rng.standard_normal((4, 4)))) < 1e-9

    def test_cross_entropy_of_matmul(self, rng):
        w = Tensor(rng.standard_normal((4, 4)))
        f = lambda x: T.cross_entropy(T.matmul(x, w), [0, 1, 2, 3])
        assert T.grad_check(f, Tensor(rng.standard_normal((4, 4)))) < 1e-4

    @pytest.mark.parametrize("op", ["gelu", "softmax_rows"])
    def test_random_inputs_in_range(self, rng, op):
        fn = getattr(T, op)
        proj = Tensor(rng.standard_normal((6, 7)))
        f = lambda x: T.tensor_sum(T.mul(fn(x), proj))
        assert T.grad_check(f, Tensor(rng.uniform(-2, 2, (6, 7)))) < 1e-4
