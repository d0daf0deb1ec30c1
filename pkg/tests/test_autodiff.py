import numpy as np
import pytest

from videolayers import autodiff as ad
from helpers import central_diff, rel_err


def scalar_loss(expr):
    """Reduce any tensor expression to a scalar via a fixed weighting."""
    w = np.linspace(0.3, 1.7, expr.data.size).reshape(expr.data.shape)
    return ad.tsum(ad.mul(expr, w))


OPS = {
    "add": lambda a, b: ad.add(a, b),
    "sub": lambda a, b: ad.sub(a, b),
    "mul": lambda a, b: ad.mul(a, b),
    "div": lambda a, b: ad.div(a, ad.add(b, 3.0)),
    "matmul": lambda a, b: ad.matmul(a, b.reshape(4, 3) if b.ndim == 2 else b),
}


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_op_gradients(name):
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(5, 4))
    b0 = rng.normal(size=(5, 4))
    op = OPS[name]

    def f_a(x):
        return scalar_loss(op(ad.Tensor(x), ad.Tensor(b0))).item()

    def f_b(x):
        return scalar_loss(op(ad.Tensor(a0), ad.Tensor(x))).item()

    a = ad.parameter(a0)
    b = ad.parameter(b0)
    loss = scalar_loss(op(a, b))
    loss.backward()
    assert rel_err(a.grad, central_diff(f_a, a0)) < 1e-6
    assert rel_err(b.grad, central_diff(f_b, b0)) < 1e-6


def test_broadcast_add_bias():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(6, 4))
    b0 = rng.normal(size=(4,))
    b = ad.parameter(b0)
    loss = scalar_loss(ad.add(ad.Tensor(x0), b))
    loss.backward()

    def f(v):
        return scalar_loss(ad.add(ad.Tensor(x0), ad.Tensor(v))).item()

    assert rel_err(b.grad, central_diff(f, b0)) < 1e-6


def test_matmul_gradients():
    rng = np.random.default_rng(11)
    a0 = rng.normal(size=(5, 4))
    w0 = rng.normal(size=(4, 3))
    a = ad.parameter(a0)
    w = ad.parameter(w0)
    loss = scalar_loss(ad.matmul(a, w))
    loss.backward()

    def f_a(x):
        return scalar_loss(ad.matmul(ad.Tensor(x), ad.Tensor(w0))).item()

    def f_w(x):
        return scalar_loss(ad.matmul(ad.Tensor(a0), ad.Tensor(x))).item()

    assert rel_err(a.grad, central_diff(f_a, a0)) < 1e-6
    assert rel_err(w.grad, central_diff(f_w, w0)) < 1e-6


@pytest.mark.parametrize(
    "fn",
    [ad.exp, ad.tanh, ad.sigmoid, ad.square, ad.relu,
     lambda t: ad.log(ad.add(ad.sigmoid(t), 0.5)),
     lambda t: ad.sqrt(ad.add(ad.square(t), 1.0))],
)
def test_unary_op_gradients(fn):
    rng = np.random.default_rng(5)
    x0 = rng.normal(size=(4, 3)) * 0.8 + 0.1

    def f(x):
        return scalar_loss(fn(ad.Tensor(x))).item()

    x = ad.parameter(x0)
    loss = scalar_loss(fn(x))
    loss.backward()
    assert rel_err(x.grad, central_diff(f, x0)) < 1e-5


def test_concat_and_slice_gradients():
    rng = np.random.default_rng(13)
    a0 = rng.normal(size=(3, 2))
    b0 = rng.normal(size=(3, 5))
    a = ad.parameter(a0)
    b = ad.parameter(b0)
    cat = ad.concat([a, b], axis=1)
    loss = scalar_loss(cat[:, 1:5])
    loss.backward()

    def f_a(x):
        return scalar_loss(ad.concat([ad.Tensor(x), ad.Tensor(b0)], axis=1)[:, 1:5]).item()

    def f_b(x):
        return scalar_loss(ad.concat([ad.Tensor(a0), ad.Tensor(x)], axis=1)[:, 1:5]).item()

    assert rel_err(a.grad, central_diff(f_a, a0)) < 1e-6
    assert rel_err(b.grad, central_diff(f_b, b0)) < 1e-6


def test_max_routes_to_argmax():
    x0 = np.array([[0.1, 0.9, 0.3], [0.8, 0.2, 0.5]])
    x = ad.parameter(x0)
    loss = ad.tsum(ad.tmax(x, axis=1))
    loss.backward()
    expect = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    np.testing.assert_array_equal(x.grad, expect)


def test_gather_rows_scatter_backward():
    table0 = np.arange(12, dtype=np.float64).reshape(6, 2)
    table = ad.parameter(table0)
    idx = np.array([0, 3, 3, 5])
    out = ad.gather_rows(table, idx)
    loss = ad.tsum(out)
    loss.backward()
    expect = np.zeros((6, 2))
    for i in idx:
        expect[i] += 1.0
    np.testing.assert_array_equal(table.grad, expect)


def test_clip_zero_gradient_outside():
    x0 = np.array([-2.0, 0.5, 2.0])
    x = ad.parameter(x0)
    loss = ad.tsum(ad.clip(x, 0.0, 1.0))
    loss.backward()
    np.testing.assert_array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


def test_no_grad_skips_tape():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y._bw is None


def test_detach_blocks_gradient():
    x = ad.parameter(np.array([2.0]))
    y = ad.mul(x.detach(), 3.0)
    z = ad.add(ad.mul(x, 1.0), y)
    ad.tsum(z).backward()
    np.testing.assert_array_equal(x.grad, np.array([1.0]))


def test_reused_node_accumulates_once_per_path():
    x = ad.parameter(np.array([3.0]))
    y = ad.mul(x, x)  # x^2, two paths
    ad.tsum(y).backward()
    np.testing.assert_allclose(x.grad, np.array([6.0]))


def test_backward_is_deterministic():
    rng = np.random.default_rng(17)
    x0 = rng.normal(size=(64, 8))
    w0 = rng.normal(size=(8, 8))

    def run():
        x = ad.parameter(x0.copy())
        w = ad.parameter(w0.copy())
        h = ad.tanh(ad.matmul(x, w))
        loss = ad.tsum(ad.square(h))
        loss.backward()
        return x.grad.copy(), w.grad.copy()

    g1 = run()
    g2 = run()
    assert np.array_equal(g1[0], g2[0])
    assert np.array_equal(g1[1], g2[1])
