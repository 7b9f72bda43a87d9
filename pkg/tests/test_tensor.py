import numpy as np
import pytest

from pmpnet import tensor as T
from pmpnet.errors import ContractError, DimensionError
from pmpnet.tensor import Tensor, backward, grad_check


def _x(rng, *shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("fn", [
    lambda x: T.sum(T.square(x)),
    lambda x: T.sum(T.sigmoid(x) * T.tanh(x)),
    lambda x: T.sum(T.softmax(x, axis=1) * np.arange(12.0).reshape(3, 4)),
    lambda x: T.sum(T.norm(x, axis=-1)),
    lambda x: T.sum(T.reduce_max(x, axis=0)),
    lambda x: T.mean(T.concat([x, T.scale(x, 2.0)], axis=0)),
    lambda x: T.sum(T.reshape(x, (4, 3)) @ np.ones((3, 2))),
    lambda x: T.sum(T.gather(x, [0, 0, 2])),
])
def test_ops_match_finite_differences(fn, rng):
    assert grad_check(fn, _x(rng, 3, 4)) < 1e-6


@pytest.mark.parametrize("relu", [False, True])
def test_linear_fused_grad(relu, rng):
    w = _x(rng, 4, 5)
    b = _x(rng, 5)
    x = _x(rng, 2, 3, 4)
    assert grad_check(lambda t: T.sum(T.square(T.linear(t, w, b, relu=relu))), x) < 1e-6
    assert grad_check(lambda t: T.sum(T.square(T.linear(x, t, b, relu=relu))), w) < 1e-6
    assert grad_check(lambda t: T.sum(T.square(T.linear(x, w, t, relu=relu))), b) < 1e-6


def test_softmax_pool_matches_unfused(rng):
    logits, values = _x(rng, 2, 5, 4, 3), _x(rng, 2, 5, 4, 3)
    ref = T.sum(T.softmax(Tensor(logits), axis=2) * values, axis=2).data
    np.testing.assert_allclose(T.softmax_pool(logits, values, axis=2).data, ref, rtol=1e-12)
    assert grad_check(lambda t: T.sum(T.square(T.softmax_pool(t, values, axis=2))), logits) < 1e-6
    assert grad_check(lambda t: T.sum(T.square(T.softmax_pool(logits, t, axis=2))), values) < 1e-6


GROUPS = np.array([[0, 1, 1, 1], [2, 3, 4, 2], [5, 5, 5, 5], [1, 6, 6, 6]])


def test_grouped_max_matches_padded_reduce_max(rng):
    x = _x(rng, 7, 3)
    np.testing.assert_array_equal(T.grouped_max(x, GROUPS).data, x[GROUPS].max(axis=1))
    assert grad_check(lambda t: T.sum(T.square(T.grouped_max(t, GROUPS))), x) < 1e-6


def test_grouped_max_gradient_to_first_slot_once():
    x = Tensor(np.array([[1.0], [3.0], [3.0]]), requires_grad=True)
    backward(T.sum(T.grouped_max(x, np.array([[0, 1, 1, 2], [2, 1, 0, 0]]))))
    # group 0 picks row 1 (first of the tied slots), group 1 picks row 2
    np.testing.assert_array_equal(x.grad, [[0.0], [1.0], [1.0]])
    with pytest.raises(IndexError):
        T.grouped_max(x, np.array([[0, 3]]))


def test_linear_matches_reference(rng):
    x, w, b = _x(rng, 2, 3, 4), _x(rng, 4, 5), _x(rng, 5)
    np.testing.assert_allclose(T.linear(x, w, b, relu=True).data, np.maximum(x @ w + b, 0))


def test_batch_gather_accumulates_duplicates(rng):
    x = Tensor(_x(rng, 2, 4, 3), requires_grad=True)
    idx = np.array([[0, 0, 1], [3, 3, 3]])
    backward(T.sum(T.batch_gather(x, idx)))
    assert x.grad[0, 0, 0] == 2.0 and x.grad[1, 3, 0] == 3.0 and x.grad[0, 2, 0] == 0.0


def test_broadcast_grad_reduces_to_operand_shape(rng):
    a = Tensor(_x(rng, 3, 4), requires_grad=True)
    b = Tensor(_x(rng, 4), requires_grad=True)
    backward(T.sum(a * b))
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0))


def test_grad_kept_in_parameter_dtype(rng):
    w = Tensor(_x(rng, 3, 2).astype(np.float32), requires_grad=True)
    x = Tensor(_x(rng, 5, 3))
    backward(T.sum(T.matmul(x, w)), wrt=[w])
    assert w.grad.dtype == np.float32


def test_backward_twice_is_an_error(rng):
    x = Tensor(_x(rng, 3), requires_grad=True)
    loss = T.sum(T.square(x))
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_backward_needs_scalar(rng):
    x = Tensor(_x(rng, 3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(T.square(x))


def test_unreached_wrt_gets_zero_grad(rng):
    x = Tensor(_x(rng, 3), requires_grad=True)
    other = Tensor(_x(rng, 2), requires_grad=True)
    backward(T.sum(x), wrt=[other])
    np.testing.assert_array_equal(other.grad, 0.0)


def test_no_grad_records_nothing(rng):
    x = Tensor(_x(rng, 3), requires_grad=True)
    with T.no_grad():
        y = T.square(x)
    assert not y.requires_grad


def test_straight_through_forwards_value_passes_gradient(rng):
    x = Tensor(_x(rng, 4), requires_grad=True)
    y = T.straight_through(x, np.zeros(4))
    np.testing.assert_array_equal(y.data, 0.0)
    backward(T.sum(T.scale(y, 3.0)))
    np.testing.assert_array_equal(x.grad, 3.0)


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(np.ones((2, 3)), np.ones((4, 3)))
    with pytest.raises(IndexError):
        T.gather(np.ones((2, 3)), [2])
