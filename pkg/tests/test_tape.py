import numpy as np
import pytest
import scipy.sparse as sp

from pdefit import tape as tp


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x, dtype=float)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


@pytest.mark.parametrize(
    "fn",
    [
        lambda x: (x * x + 3.0 * x - 1.0 / (x + 2.0)).sum(),
        lambda x: (tp.exp(x * 0.3) * x).sum(),
        lambda x: tp.absolute(x - 0.4).sum(),
        lambda x: tp.leaky_relu(x, 0.01).sum(),
        lambda x: ((x - 1.0) ** 3).sum(),
        lambda x: (tp.log(x + 3.0) * 2.0).sum(),
    ],
)
def test_elementwise_grads_match_finite_differences(fn):
    rng = np.random.default_rng(0)
    x = rng.normal(size=7)
    t = tp.Tape()
    xv = t.leaf(x)
    out = fn(xv)
    t.backward({out: 1.0})
    fd = numeric_grad(lambda z: float(tp.value_of(fn(tp.Tape().leaf(z)))), x)
    np.testing.assert_allclose(xv.grad, fd, rtol=1e-6, atol=1e-8)


def test_matvec_grad():
    rng = np.random.default_rng(1)
    A = tp.LinOp(sp.random(6, 6, density=0.5, random_state=2, format="csr"))
    x = rng.normal(size=6)
    w = rng.normal(size=6)
    t = tp.Tape()
    xv = t.leaf(x)
    y = tp.matvec(A, xv)
    t.backward({y: w})
    np.testing.assert_allclose(xv.grad, A.mat.toarray().T @ w, rtol=1e-12)


def test_dense_dot_grads():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(5, 2))
    W = rng.normal(size=(2, 4))
    g = rng.normal(size=(5, 4))
    t = tp.Tape()
    Xv, Wv = t.leaf(X), t.leaf(W)
    Y = tp.dot(Xv, Wv)
    t.backward({Y: g})
    np.testing.assert_allclose(Xv.grad, g @ W.T, rtol=1e-12)
    np.testing.assert_allclose(Wv.grad, X.T @ g, rtol=1e-12)


def test_broadcast_bias_grad_sums_rows():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(5, 3))
    b = rng.normal(size=3)
    g = rng.normal(size=(5, 3))
    t = tp.Tape()
    bv = t.leaf(b)
    Y = t.leaf(X) + bv
    t.backward({Y: g})
    np.testing.assert_allclose(bv.grad, g.sum(axis=0), rtol=1e-12)


def test_getitem_and_concatenate_roundtrip():
    rng = np.random.default_rng(5)
    x = rng.normal(size=8)
    t = tp.Tape()
    xv = t.leaf(x)
    a, b = xv[:3], xv[3:]
    y = tp.concatenate([a * 2.0, b])
    t.backward({y: np.ones(8)})
    np.testing.assert_allclose(xv.grad, np.concatenate([np.full(3, 2.0), np.ones(5)]))


def test_grad_accumulates_over_shared_subexpressions():
    t = tp.Tape()
    x = t.leaf(np.array([2.0]))
    y = x * x + x * 3.0  # dy/dx = 2x + 3 = 7
    t.backward({y: np.array([1.0])})
    np.testing.assert_allclose(x.grad, [7.0])


def test_multiple_seeds_accumulate():
    t = tp.Tape()
    x = t.leaf(np.array([1.5]))
    y1 = x * 2.0
    y2 = x * x
    t.backward({y1: np.array([1.0]), y2: np.array([1.0])})
    np.testing.assert_allclose(x.grad, [2.0 + 3.0])


def test_plain_ndarray_dispatch():
    x = np.array([-1.0, 0.5])
    assert isinstance(tp.exp(x), np.ndarray)
    np.testing.assert_allclose(tp.leaky_relu(x, 0.1), [-0.1, 0.5])
