import numpy as np
import pytest

from utils.tensor import PrimitiveKind, ShapeError, Tensor, apply, backward, finite_difference_grad, relative_error


class TestApply:
    def test_add(self):
        out = apply("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])])
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_matmul_identity(self, rng):
        a = rng.standard_normal((3, 5))
        out = apply(PrimitiveKind.MATMUL, [Tensor(np.eye(3)), Tensor(a)])
        np.testing.assert_array_equal(out.data, a)

    def test_relu(self):
        out = apply("relu", [Tensor([-1.0, 0.0, 2.0])])
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_shape_mismatch_names_extents(self):
        with pytest.raises(ShapeError, match=r"\[2\].*\[3\]"):
            apply("add", [Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0])])

    def test_matmul_inner_mismatch(self):
        with pytest.raises(ShapeError):
            apply("matmul", [Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3)))])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            apply("softmax", [Tensor([1.0])])

    def test_inputs_not_mutated(self, rng):
        data = rng.standard_normal((2, 2))
        x = Tensor(data)
        apply("exp", [x])
        np.testing.assert_array_equal(x.data, data)
        assert not x.data.flags.writeable

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))

    def test_forward_is_deterministic(self, rng):
        a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
        first = (Tensor(a) @ Tensor(b)).relu().exp().data
        second = (Tensor(a) @ Tensor(b)).relu().exp().data
        assert first.tobytes() == second.tobytes()

    def test_no_graph_without_grad(self):
        out = Tensor([1.0, 2.0]) * 3.0
        assert not out.requires_grad


class TestBackward:
    def test_square_sum(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        grads = backward((x * x).sum())
        np.testing.assert_allclose(grads[x].data, [2.0, 4.0, 6.0])
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_relu_flat_region(self):
        x = Tensor(-5.0, requires_grad=True)
        assert backward(x.relu())[x].item() == 0.0

    def test_relu_subgradient_at_zero(self):
        x = Tensor([0.0, 1.0], requires_grad=True)
        np.testing.assert_array_equal(backward(x.relu().sum())[x].data, [0.0, 1.0])

    def test_max_tie_goes_to_lowest_index(self):
        x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
        np.testing.assert_array_equal(backward(x.max(axis=1).sum())[x].data, [[0.0, 1.0, 0.0]])

    def test_broadcast_gradient_sums_back(self):
        b = Tensor([1.0, 2.0], requires_grad=True)
        out = (Tensor(np.ones((3, 2))) + b).sum()
        np.testing.assert_array_equal(backward(out)[b].data, [3.0, 3.0])

    def test_repeated_backward_is_identical(self, rng):
        x = Tensor(rng.standard_normal(4), requires_grad=True)
        root = (x.exp() * x).sum()
        assert backward(root)[x].data.tobytes() == backward(root)[x].data.tobytes()

    def test_non_scalar_root(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            backward(x * 2.0)

    def test_disconnected_root(self):
        with pytest.raises(ValueError):
            backward(Tensor(1.0))

    def test_unreached_tensor_missing(self):
        x = Tensor([1.0], requires_grad=True)
        y = Tensor([1.0], requires_grad=True)
        grads = backward(x.sum())
        assert y not in grads
        assert grads.get(y) is None

    def test_two_layer_mlp_matches_finite_differences(self, rng):
        w1, w2 = rng.standard_normal((3, 5)), rng.standard_normal((5, 2))
        x = rng.standard_normal((4, 3))

        def loss(w: Tensor) -> Tensor:
            hidden = (Tensor(x) @ w).relu()
            return ((hidden @ Tensor(w2)).exp()).sum()

        variable = Tensor(w1, requires_grad=True)
        analytic = backward(loss(variable))[variable].data
        numeric = finite_difference_grad(loss, Tensor(w1)).data
        assert relative_error(analytic, numeric, floor=1e-6) < 1e-4


class TestFiniteDifference:
    def test_sum_gives_ones(self, rng):
        grad = finite_difference_grad(lambda t: t.sum(), Tensor(rng.standard_normal(5)), h=1e-5)
        np.testing.assert_allclose(grad.data, np.ones(5), atol=1e-9)

    def test_quadratic(self):
        grad = finite_difference_grad(lambda t: (t * t).sum(), Tensor(3.0))
        assert grad.item() == pytest.approx(6.0, abs=1e-6)

    def test_accepts_float_valued_functions(self):
        grad = finite_difference_grad(lambda t: float(np.sum(t.data) * 2), Tensor([1.0, 2.0]))
        np.testing.assert_allclose(grad.data, [2.0, 2.0], atol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9]), floor=1e-6) == pytest.approx(1e-3)
