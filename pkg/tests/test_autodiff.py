import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynattack import autodiff as ad
from dynattack.autodiff import NonFiniteError, ShapeError, Tensor
from dynattack.verify import central_fd, rel_error


def grad_of(f, x):
    t = ad.tensor(x, requires_grad=True)
    ad.backward(f(t), inputs=[t])
    return t.grad


def test_add_example():
    np.testing.assert_array_equal(ad.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])


def test_sigmoid_at_zero():
    assert ad.sigmoid(0.0).item() == 0.5


def test_cross_entropy_uniform_is_ln2():
    loss = ad.softmax_cross_entropy(np.array([[0.0, 0.0]]), np.array([0]))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_square_gradient():
    assert grad_of(lambda x: ad.mul(x, x), 3.0) == 6.0


def test_sigmoid_gradient_at_zero():
    assert grad_of(ad.sigmoid, 0.0) == 0.25


def test_relu_and_abs_subgradient_at_zero():
    assert grad_of(ad.relu, 0.0) == 0.0
    assert grad_of(ad.absolute, 0.0) == 0.0


def test_dense_net_matches_finite_differences(rng):
    W1, W2, W3 = rng.normal(size=(4, 6)), rng.normal(size=(6, 5)), rng.normal(size=(5, 3))
    y = np.array([0, 2, 1])

    def f(x):
        h = ad.sigmoid(ad.matmul(x, W1))
        h = ad.relu(ad.sub(ad.matmul(h, W2), 0.3))
        return ad.softmax_cross_entropy(ad.matmul(h, W3), y)

    x0 = rng.normal(size=(3, 4))
    g = grad_of(f, x0)
    fd = central_fd(lambda z: f(Tensor(z)).item(), x0, 1e-4)
    assert rel_error(g, fd) < 1e-5


@pytest.mark.parametrize("name,fn", [
    ("conv2d", lambda x, w: ad.conv2d(x, w)),
    ("matmul", lambda x, w: ad.matmul(ad.reshape(x, (8, 8)), w)),
])
def test_primitive_gradients_vs_fd(rng, name, fn):
    x0 = rng.normal(size=(2, 2, 4, 4))
    w = rng.normal(size=(3, 2, 3, 3)) if name == "conv2d" else rng.normal(size=(8, 3))
    c = None

    def f(x):
        nonlocal c
        out = fn(x, w)
        if c is None:
            c = np.random.default_rng(0).normal(size=out.shape)
        return ad.tsum(ad.mul(out, c))

    g = grad_of(f, x0)
    fd = central_fd(lambda z: f(Tensor(z)).item(), x0, 1e-6)
    assert rel_error(g, fd) < 1e-6


def test_gather_segment_sparse_conv_gradients(rng):
    idx = np.array([2, -1, 0, 2, 1])
    seg = np.array([0, 1, 1, 0, 2])
    nb = np.array([[0, -1, 1], [2, 1, -1], [-1, -1, 0]])
    w = rng.normal(size=(3, 4, 2))
    c1, c2 = rng.normal(size=(5, 2)), rng.normal(size=(3, 4))

    def f(x):
        a = ad.tsum(ad.mul(ad.segment_sum(ad.gather_rows(x, idx), seg, 3), c1[:3]))
        b = ad.tsum(ad.mul(ad.sparse_conv(x, nb, w, np.ones(4)), c2))
        return ad.add(a, b)

    x0 = rng.normal(size=(3, 2))
    assert rel_error(grad_of(f, x0), central_fd(lambda z: f(Tensor(z)).item(), x0, 1e-6)) < 1e-7


def test_unused_leaf_gets_exact_zero():
    a, b = ad.tensor(2.0, True), ad.tensor(5.0, True)
    ad.backward(ad.mul(a, a), inputs=[a, b])
    assert b.grad == 0.0 and a.grad == 4.0


def test_backward_is_deterministic(rng):
    x0 = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))

    def run():
        return grad_of(lambda x: ad.tsum(ad.sigmoid(ad.matmul(x, w))), x0)

    assert np.array_equal(run(), run())


def test_shared_subexpression_accumulates():
    # y = x*x + x*x reuses x on four edges
    g = grad_of(lambda x: ad.add(ad.mul(x, x), ad.mul(x, x)), 1.5)
    assert g == 6.0


def test_nonscalar_loss_rejected():
    with pytest.raises(ShapeError):
        ad.backward(ad.tensor([1.0, 2.0], True))


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_nonfinite_forward_raises():
    with pytest.raises(NonFiniteError):
        ad.log(ad.tensor(0.0, True))


def test_tape_topological_order(rng):
    x = ad.tensor(rng.normal(size=3), True)
    loss = ad.tsum(ad.exp(ad.mul(ad.add(x, 1.0), 2.0)))
    tape = ad.Tape.from_loss(loss)
    ids = [op.id for op in tape.ops]
    assert ids == sorted(ids) and len(set(ids)) == len(ids) == len(tape)
    pos = {op.id: i for i, op in enumerate(tape.ops)}
    for op in tape.ops:
        for t in op.inputs:
            if t._op is not None:
                assert pos[t._op.id] < pos[op.id]


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-30, 30)))
def test_sigmoid_symmetry_and_range(x):
    s = ad.sigmoid(x).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + ad.sigmoid(-x).data, 1.0, atol=1e-15)


@given(arrays(np.float64, (2, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (3,), elements=st.floats(-5, 5)))
def test_broadcast_add_gradient_sums(a, b):
    tb = ad.tensor(b, True)
    ad.backward(ad.tsum(ad.add(a, tb)), inputs=[tb])
    np.testing.assert_array_equal(tb.grad, np.full(3, 2.0))
