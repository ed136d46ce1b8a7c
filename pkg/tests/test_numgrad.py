"""Unit tests for the autodiff engine: op semantics, gradient correctness
against central finite differences, accumulation, and determinism."""

import numpy as np
import pytest

from conftest import check_gradients, finite_difference, grad_close
from crossdistil import numgrad as ng
from crossdistil.errors import NumericError, ShapeError, UsageError
from crossdistil.numgrad import Tensor


def t(values, requires_grad=False):
    return Tensor(np.atleast_2d(np.asarray(values, dtype=np.float64)), requires_grad)


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert ng.sigmoid(t(0.0)).item() == 0.5

    def test_matmul_identity(self):
        a = t([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        out = ng.matmul(t(np.eye(2)), a)
        np.testing.assert_array_equal(out.values, a.values)

    def test_reduce_mean(self):
        assert ng.reduce_mean(t([1.0, 2.0, 3.0, 4.0])).item() == 2.5

    def test_add_row_broadcast(self):
        out = ng.add(t([[1.0, 2.0], [3.0, 4.0]]), t([[10.0, 20.0]]))
        np.testing.assert_array_equal(out.values, [[11.0, 22.0], [13.0, 24.0]])

    def test_add_rejects_column_broadcast(self):
        with pytest.raises(ShapeError):
            ng.add(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [2.0]]))

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ng.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_concat_cols(self):
        out = ng.concat_cols(t([[1.0], [2.0]]), t([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.values, [[1.0, 3.0, 4.0], [2.0, 5.0, 6.0]])

    def test_row_gather_values_and_bounds(self):
        table = t([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        out = ng.row_gather(table, [2, 0, 2])
        np.testing.assert_array_equal(out.values, [[5.0, 6.0], [1.0, 2.0], [5.0, 6.0]])
        with pytest.raises(UsageError, match="out of range"):
            ng.row_gather(table, [3])

    def test_row_softmax_rows_sum_to_one(self, rng):
        x = t(rng.normal(size=(4, 5)))
        np.testing.assert_allclose(ng.row_softmax(x).values.sum(axis=1), 1.0, atol=1e-12)

    def test_log_of_nonpositive_is_numeric_error(self):
        with pytest.raises(NumericError, match="log"):
            ng.log(t([[0.0]]))

    def test_exp_overflow_is_numeric_error(self):
        with pytest.raises(NumericError, match="exp"):
            ng.exp(t([[1000.0]]))

    def test_softplus_large_positive_is_stable(self):
        out = ng.softplus(t([[800.0]]))
        assert out.item() == 800.0

    def test_sigmoid_extremes_finite(self):
        out = ng.sigmoid(t([[-800.0, 800.0]]))
        np.testing.assert_allclose(out.values, [[0.0, 1.0]], atol=1e-300)

    def test_tensor_must_be_2d(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 2, 2)))


class TestBackward:
    def test_reduce_sum_grad_is_ones(self, rng):
        x = t(rng.normal(size=(3, 4)), requires_grad=True)
        ng.backward(ng.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sigmoid_grad_at_zero(self):
        x = t(0.0, requires_grad=True)
        ng.backward(ng.sigmoid(x))
        assert x.grad[0, 0] == 0.25

    def test_backward_rejects_non_scalar(self, rng):
        x = t(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(UsageError, match="1x1"):
            ng.backward(ng.neg(x))

    def test_composed_ce_matches_finite_difference(self, rng):
        # CE(1, sigmoid(w . x)) checked entrywise at tight tolerance
        w = t(rng.normal(size=(4, 1)), requires_grad=True)
        x = t(rng.normal(size=(1, 4)), requires_grad=True)

        def loss():
            z = ng.matmul(x, w)
            return ng.neg(ng.log(ng.sigmoid(z)))

        ng.backward(loss())
        for tensor in (w, x):
            for pos in range(4):
                r, c = (pos, 0) if tensor is w else (0, pos)
                fd = finite_difference(loss, tensor, r, c)
                assert grad_close(tensor.grad[r, c], fd, rel=1e-5)

    def test_two_backwards_accumulate_exactly(self, rng):
        x = t(rng.normal(size=(3, 2)), requires_grad=True)

        def loss():
            return ng.reduce_mean(ng.mul(x, x))

        ng.backward(loss())
        once = x.grad.copy()
        ng.backward(loss())
        np.testing.assert_array_equal(x.grad, 2.0 * once)

    def test_unreachable_tensor_grad_untouched(self, rng):
        x = t(rng.normal(size=(2, 2)), requires_grad=True)
        y = t(rng.normal(size=(2, 2)), requires_grad=True)
        ng.backward(ng.reduce_sum(x))
        np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))

    def test_diamond_reuse_accumulates_both_paths(self):
        x = t(2.0, requires_grad=True)
        # f = x*x + x, df/dx = 2x + 1 = 5
        out = ng.add(ng.mul(x, x), x)
        ng.backward(out)
        assert x.grad[0, 0] == 5.0


class TestDetachAndNoGrad:
    def test_detach_preserves_values(self, rng):
        x = t(rng.normal(size=(3, 3)), requires_grad=True)
        d = x.detach()
        np.testing.assert_array_equal(d.values, x.values)
        assert not d.requires_grad

    def test_loss_through_detach_gives_zero_grad(self, rng):
        x = t(rng.normal(size=(2, 2)), requires_grad=True)
        w = t(rng.normal(size=(2, 2)), requires_grad=True)
        ng.backward(ng.reduce_sum(ng.mul(ng.mul(x, x).detach(), w)))
        np.testing.assert_array_equal(x.grad, np.zeros((2, 2)))
        assert np.abs(w.grad).sum() > 0

    def test_no_grad_blocks_recording(self, rng):
        x = t(rng.normal(size=(2, 2)), requires_grad=True)
        with ng.no_grad():
            y = ng.mul(x, x)
        assert not y.requires_grad
        assert y._parents == ()


def _random_instance(op_name, rng):
    """Build (loss_fn, differentiable tensors) for one op at a random point."""
    m, n = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    mk = lambda shape, scale=1.0: Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)

    if op_name == "matmul":
        k = int(rng.integers(2, 4))
        a, b = mk((m, k)), mk((k, n))
        fwd = lambda: ng.matmul(a, b)
        tensors = (a, b)
    elif op_name == "add":
        a, b = mk((m, n)), mk((1, n))
        fwd = lambda: ng.add(a, b)
        tensors = (a, b)
    elif op_name == "mul":
        a, b = mk((m, n)), mk((m, n))
        fwd = lambda: ng.mul(a, b)
        tensors = (a, b)
    elif op_name == "concat_cols":
        a, b = mk((m, n)), mk((m, n + 1))
        fwd = lambda: ng.concat_cols(a, b)
        tensors = (a, b)
    elif op_name == "row_gather":
        a = mk((m + 2, n))
        idx = rng.integers(0, m + 2, size=m)
        fwd = lambda: ng.row_gather(a, idx)
        tensors = (a,)
    elif op_name == "log":
        a = Tensor(rng.uniform(0.5, 3.0, size=(m, n)), requires_grad=True)
        fwd = lambda: ng.log(a)
        tensors = (a,)
    elif op_name == "scalar_scale":
        a = mk((m, n))
        c = float(rng.normal())
        fwd = lambda: ng.scalar_scale(a, c)
        tensors = (a,)
    else:
        a = mk((m, n))
        fwd = lambda: getattr(ng, op_name)(a)
        tensors = (a,)

    # project through a fixed random matrix so every output entry matters
    proj = Tensor(rng.normal(size=fwd().shape))
    loss_fn = lambda: ng.reduce_sum(ng.mul(fwd(), proj))
    return loss_fn, tensors


ALL_OPS = (
    "matmul", "add", "mul", "neg", "sigmoid", "exp", "log", "softplus", "relu",
    "concat_cols", "row_gather", "reduce_sum", "reduce_mean", "row_softmax",
    "scalar_scale",
)


@pytest.mark.parametrize("op_name", ALL_OPS)
def test_every_op_gradient_against_finite_difference(op_name):
    rng = np.random.default_rng(hash(op_name) % (2**32))
    for _ in range(20):
        loss_fn, tensors = _random_instance(op_name, rng)
        check_gradients(loss_fn, tensors, rng, n_entries=4)


def test_determinism_bit_identical_run():
    def run():
        rng = np.random.default_rng(99)
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        loss = ng.reduce_mean(ng.sigmoid(ng.matmul(x, w)))
        ng.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, xg1, wg1 = run()
    l2, xg2, wg2 = run()
    assert l1 == l2
    assert xg1.tobytes() == xg2.tobytes()
    assert wg1.tobytes() == wg2.tobytes()


def test_zero_grad_resets_exactly():
    x = t([[1.0, -2.0]], requires_grad=True)
    ng.backward(ng.reduce_sum(x))
    x.zero_grad()
    assert x.grad.tobytes() == np.zeros((1, 2)).tobytes()
