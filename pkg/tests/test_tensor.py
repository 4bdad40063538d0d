import numpy as np
import pytest

from pacmac import tensor as T
from pacmac.errors import (
    InvalidAttributeError,
    NonFiniteError,
    NotScalarError,
    ShapeMismatchError,
    UntrackedRootError,
)

from .gradcheck import check_grad, primitive_cases, rel_error


class TestForwardValues:
    def test_matmul_identity(self):
        a = np.array([[1.5, -2.0], [0.25, 3.0]])
        out = T.matmul(T.constant(np.eye(2)), T.constant(a))
        np.testing.assert_array_equal(out.values, a)

    def test_softmax_closed_form(self):
        out = T.softmax_rows(T.constant([[1.0, 0.0]]))
        np.testing.assert_allclose(out.values, [[0.7311, 0.2689]], atol=1e-4)

    def test_cross_entropy_closed_form(self):
        loss = T.cross_entropy_from_logits(T.constant([1.0, 0.0]), 0)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_softmax_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(0)
        x = T.constant(rng.uniform(-30, 30, size=(13, 7)))
        p = T.softmax_rows(x).values
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert (p > 0).all()

    def test_layer_norm_standardizes_before_affine(self):
        rng = np.random.default_rng(1)
        x = T.constant(rng.normal(3.0, 5.0, size=(11, 16)))
        # eps small enough that its variance bias sits below the tolerance
        out = T.layer_norm(x, T.constant(np.ones(16)), T.constant(np.zeros(16)),
                           eps=1e-12).values
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-8)

    def test_mse_masked_counts_selected_elements_only(self):
        pred = T.constant([[0.0, 0.0], [5.0, 5.0]])
        tgt = T.constant([[1.0, 1.0], [0.0, 0.0]])
        loss = T.mse_masked(pred, tgt, mask=np.array([1.0, 0.0]))
        assert loss.item() == pytest.approx(1.0)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = T.parameter(np.random.default_rng(2).normal(size=(3, 4)))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_mse_convention_gradient(self):
        x = T.parameter([3.0])
        T.backward(T.mse_masked(x, T.constant([0.0])))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_product_rule(self):
        a = T.parameter([2.0])
        b = T.parameter([3.0])
        T.backward(T.mul(a, b))
        np.testing.assert_allclose(a.grad, [3.0])
        np.testing.assert_allclose(b.grad, [2.0])

    def test_fanout_accumulates(self):
        # y = x*x + x used twice: dy/dx = 2x + 1
        x = T.parameter([4.0])
        y = T.add(T.mul(x, x), x)
        T.backward(y)
        np.testing.assert_allclose(x.grad, [9.0])

    def test_diamond_graph_matches_finite_differences(self):
        def f(x):
            left = T.gelu(x)
            right = T.scale(x, 0.5)
            return T.mean(T.mul(T.add(left, right), T.add(left, right)))

        check_grad(f, T.Tensor(np.random.default_rng(3).uniform(-2, 2, size=(4, 3))))

    def test_root_must_be_scalar(self):
        x = T.parameter(np.ones((2, 2)))
        with pytest.raises(NotScalarError):
            T.backward(T.add(x, x))

    def test_root_must_be_tracked(self):
        with pytest.raises(UntrackedRootError):
            T.backward(T.constant([1.0]))

    def test_no_grad_suppresses_history(self):
        x = T.parameter([1.0, 2.0])
        with T.no_grad():
            y = T.mean(x)
        assert not y.tracked and y.node is None


class TestFiniteDifferences:
    def test_sum_all_ones(self):
        fd = T.finite_difference_gradient(T.sum_all, T.Tensor(np.arange(6.0).reshape(2, 3)))
        np.testing.assert_allclose(fd.values, 1.0, atol=1e-8)

    def test_half_norm_squared(self):
        fd = T.finite_difference_gradient(
            lambda x: T.scale(T.mse_masked(x, T.constant(np.zeros(2))), 1.0),
            T.Tensor([1.0, 2.0]))
        # mean-of-squares convention: gradient of mse(x, 0) is 2x/n = x here
        np.testing.assert_allclose(fd.values, [1.0, 2.0], atol=1e-6)

    def test_constant_function_is_zero(self):
        fd = T.finite_difference_gradient(lambda x: 7.5, T.Tensor([1.0, -1.0]))
        np.testing.assert_allclose(fd.values, 0.0)

    def test_nonfinite_reported(self):
        with pytest.raises(NonFiniteError):
            T.finite_difference_gradient(lambda x: float("nan"), T.Tensor([1.0]))

    def test_bad_step_rejected(self):
        with pytest.raises(InvalidAttributeError):
            T.finite_difference_gradient(T.sum_all, T.Tensor([1.0]), h=0.0)


class TestPrimitiveGradients:
    def test_all_primitives_match_finite_differences(self):
        rng = np.random.default_rng(1234)
        seen = set()
        for trial in range(12):
            for name, f, x0 in primitive_cases(rng):
                seen.add(name)
                check_grad(f, x0)
        assert {"add", "mul", "matmul", "softmax_rows", "layer_norm", "gelu",
                "cross_entropy", "mse_masked", "transpose", "reshape",
                "mean_axis", "scale", "concat", "log"} <= seen


class TestErrors:
    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.matmul(T.constant(np.ones((2, 3))), T.constant(np.ones((2, 3))))

    def test_add_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((3, 2))))

    def test_add_rejects_stretch_broadcast(self):
        with pytest.raises(ShapeMismatchError):
            T.add(T.constant(np.ones((2, 3))), T.constant(np.ones((1, 3))))

    def test_layer_norm_bad_eps(self):
        x = T.constant(np.ones((2, 4)))
        with pytest.raises(InvalidAttributeError):
            T.layer_norm(x, T.constant(np.ones(4)), T.constant(np.zeros(4)), eps=0.0)

    def test_cross_entropy_target_range(self):
        with pytest.raises(InvalidAttributeError):
            T.cross_entropy_from_logits(T.constant([[0.0, 1.0]]), [2])

    def test_log_requires_positive(self):
        with pytest.raises(NonFiniteError):
            T.log(T.constant([0.0, 1.0]))

    def test_evaluate_primitive_dispatch(self):
        out = T.evaluate_primitive("add", [np.ones(2), np.ones(2)])
        np.testing.assert_array_equal(out.values, [2.0, 2.0])
        with pytest.raises(ValueError):
            T.evaluate_primitive("not_a_kind", [np.ones(2)])


def test_rel_error_helper():
    assert rel_error(np.array([1.0]), np.array([1.0])) == 0.0
