import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentfit import tape as tp
from latentfit.tape import GradientTape, TapeError, Tensor
from tests.gradcheck import check_gradients


def _away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def test_elementwise_gradients(rng):
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(2,))
    check_gradients(lambda x, y: tp.sum_(tp.mul(tp.add(x, y), tp.sub(x, y))), a, b)
    check_gradients(lambda x: tp.sum_(tp.tanh(x) * 3.0 - tp.square(x)), a)
    check_gradients(lambda x: tp.mean(-x / 4.0), a)


def test_piecewise_gradients_away_from_kinks(rng):
    x = _away_from_zero(rng, (4, 3))
    check_gradients(lambda v: tp.sum_(tp.relu(v)), x)
    check_gradients(lambda v: tp.sum_(tp.abs_(v)), x)
    check_gradients(lambda v: tp.sum_(tp.clamp(v, -0.5, 0.5)), x)


def test_linear_and_weight_norm_gradients(rng):
    x = rng.normal(size=(5, 3))
    v = rng.normal(size=(4, 3))
    g = rng.uniform(0.5, 2.0, size=4)
    b = rng.normal(size=4)
    check_gradients(lambda x_, v_, g_, b_: tp.sum_(tp.tanh(tp.linear(x_, tp.weight_norm(v_, g_), b_))), x, v, g, b)


def test_weight_norm_rows_have_requested_magnitude(rng):
    v = rng.normal(size=(6, 4))
    g = rng.uniform(0.5, 2.0, size=6)
    w = tp.weight_norm(Tensor(v), Tensor(g)).value
    assert np.allclose(np.linalg.norm(w, axis=1), g)


def test_shape_op_gradients(rng):
    a = rng.normal(size=(3, 2))
    b = rng.normal(size=(3, 4))
    c = rng.normal(size=3)
    weights = rng.normal(size=(3, 6))
    spread = rng.normal(size=(5, 3))
    m = rng.normal(size=(2, 4))
    check_gradients(lambda x, y: tp.sum_(tp.concat([x, y], axis=1) * weights), a, b)
    check_gradients(lambda x: tp.sum_(tp.square(tp.reshape(x, (2, 3)))), a)
    check_gradients(lambda x: tp.sum_(tp.repeat_rows(x, 5) * spread), c)
    check_gradients(lambda x: tp.sum_(tp.take_rows(x, np.array([0, 2, 2, 1])) * 1.5), b)
    check_gradients(lambda x: tp.sum_(tp.row_norm(x)), b)
    check_gradients(lambda x: tp.sum_(tp.matmul(x, b.T)), m)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv3d_gradients(rng, stride):
    x = rng.normal(size=(1, 4, 4, 4, 2))
    w = rng.normal(size=(3, 3, 3, 2, 3))
    b = rng.normal(size=3)
    side = 4 if stride == 1 else 2
    weights = rng.normal(size=(1, side, side, side, 3))
    check_gradients(lambda x_, w_, b_: tp.sum_(tp.conv3d(x_, w_, b_, stride=stride) * weights), x, w, b, rtol=1e-4)


def test_conv3d_identity_kernel_copies_input(rng):
    x = rng.normal(size=(2, 3, 3, 3, 1))
    w = np.zeros((3, 3, 3, 1, 1))
    w[1, 1, 1, 0, 0] = 1.0
    out = tp.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    assert np.allclose(out.value, x)


def test_constants_are_not_recorded():
    tape = GradientTape()
    x = tape.watch(np.ones(3), "x")
    frozen = Tensor(np.full(3, 2.0))
    loss = tp.sum_(x * frozen)
    assert len(tape) == 2
    assert (frozen + frozen).tape is None
    grads = tape.backward(loss)
    assert np.allclose(grads["x"], 2.0)
    assert frozen.grad is None


def test_unreached_leaf_has_zero_gradient():
    tape = GradientTape()
    x = tape.watch(np.ones(2), "x")
    tape.watch(np.ones(3), "unused")
    grads = tape.backward(tp.sum_(x))
    assert np.array_equal(grads["unused"], np.zeros(3))


def test_tape_is_single_use():
    tape = GradientTape()
    x = tape.watch(np.ones(2), "x")
    loss = tp.sum_(x)
    tape.backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        tape.backward(loss)
    with pytest.raises(TapeError, match="consumed"):
        tape.watch(np.ones(1))


def test_backward_needs_scalar_root():
    tape = GradientTape()
    x = tape.watch(np.ones(2), "x")
    with pytest.raises(TapeError, match="scalar"):
        tape.backward(x * 2.0)


def test_mixing_tapes_fails():
    a = GradientTape().watch(np.ones(2))
    b = GradientTape().watch(np.ones(2))
    with pytest.raises(TapeError, match="different tapes"):
        a + b


def test_division_by_tensor_is_rejected():
    with pytest.raises(TapeError):
        Tensor(np.ones(2)) / Tensor(np.ones(2))


def test_shared_node_accumulates_gradient():
    tape = GradientTape()
    x = tape.watch(np.array([1.0, 2.0]), "x")
    y = x * 3.0
    grads = tape.backward(tp.sum_(y + y))
    assert np.allclose(grads["x"], 6.0)


@given(rows=st.integers(1, 5), cols=st.integers(1, 5))
def test_broadcast_gradient_counts_copies(rows, cols):
    tape = GradientTape()
    a = tape.watch(np.zeros((rows, cols)), "a")
    b = tape.watch(np.zeros((1, cols)), "b")
    c = tape.watch(np.zeros(()), "c")
    grads = tape.backward(tp.sum_(a + b + c))
    assert np.allclose(grads["a"], 1.0)
    assert np.allclose(grads["b"], rows)
    assert np.isclose(grads["c"], rows * cols)
