import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hesscore.data import Dataset
from hesscore.models import LogisticModel, QuadraticModel, RidgeModel, ToyMlp, build_model
from hesscore.numerics import DimensionError, sigmoid
from hesscore.verify import fd_hessian


def _fd_grad(f, w, h=1e-6):
    g = np.empty_like(w)
    for k in range(len(w)):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (f(w + e) - f(w - e)) / (2 * h)
    return g


def _logistic(seed=0, n=12, d=4, mu=0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.r_[0, 1, rng.integers(0, 2, size=n - 2)]
    return LogisticModel(Dataset(X, y), mu=mu)


def test_logistic_hessian_at_zero():
    m = LogisticModel(Dataset(np.array([[1.0]]), np.array([1]), n_classes=2), mu=0.0)
    assert m.probs(np.zeros(2)).tolist() == [0.5]
    np.testing.assert_array_equal(m.hess_i(np.zeros(2), 0), 0.25 * np.ones((2, 2)))


def test_logistic_hessian_zero_features():
    m = LogisticModel(Dataset(np.zeros((1, 2)), np.array([0]), n_classes=2), mu=0.0)
    w = np.array([0.3, -1.2, 0.7])
    s = sigmoid(0.7)
    expect = np.zeros((3, 3))
    expect[2, 2] = s * (1 - s)
    np.testing.assert_allclose(m.hess_i(w, 0), expect, rtol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_logistic_grad_and_hessian_match_fd(seed):
    m = _logistic(seed)
    w = np.random.default_rng(seed + 100).normal(size=m.dim)
    for i in range(3):
        np.testing.assert_allclose(m.grad_i(w, i), _fd_grad(lambda v: m.loss_i(v, i), w), atol=1e-7)
        assert np.abs(m.hess_i(w, i) - fd_hessian(lambda v: m.grad_i(v, i), w)).max() < 1e-5


def test_logistic_hvp_matches_fd():
    m = _logistic(1, n=30)
    rng = np.random.default_rng(2)
    w, z = rng.normal(size=m.dim), rng.normal(size=m.dim)
    batch = np.arange(10, 25)
    h = 1e-5
    fd = (m.grad(w + h * z, batch) - m.grad(w - h * z, batch)) / (2 * h)
    hv = m.hvp(w, z, batch)
    assert np.linalg.norm(hv - fd) <= 1e-4 * np.linalg.norm(fd)
    np.testing.assert_allclose(hv, m.hessian(w, batch) @ z, rtol=1e-12, atol=1e-14)


def test_logistic_weighted_aggregates():
    m = _logistic(3)
    w = np.random.default_rng(0).normal(size=m.dim)
    idx, wt = np.array([0, 4, 7]), np.array([2.0, 1.0, 5.0])
    np.testing.assert_allclose(m.grad(w, idx, wt), wt @ m.grads(w, idx) / wt.sum())
    np.testing.assert_allclose(m.hessian(w, idx, wt), np.einsum("i,ijk->jk", wt, m.hessians(w, idx)) / wt.sum())
    np.testing.assert_allclose(m.hess_diags(w, idx), np.diagonal(m.hessians(w, idx), axis1=1, axis2=2))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_logistic_strong_convexity_floor(seed, mu):
    m = _logistic(seed % 97, mu=mu)
    w = np.random.default_rng(seed).normal(size=m.dim) * 3
    D = m.hess_diags(w)
    assert np.all(D[:, :-1] >= mu)
    H = m.hessian(w)
    # the bias is unregularized, so the floor holds on the weight block only
    assert np.linalg.eigvalsh(H[:-1, :-1]).min() >= mu - 1e-12


def test_logistic_index_out_of_range():
    m = _logistic()
    with pytest.raises(IndexError):
        m.grads(np.zeros(m.dim), [m.n])
    with pytest.raises(DimensionError):
        m.grad(np.zeros(m.dim + 1))


def test_logistic_rejects_multiclass():
    with pytest.raises(ValueError):
        LogisticModel(Dataset(np.zeros((3, 1)), np.array([0, 1, 2])))


def test_ridge_grad_and_hessian():
    rng = np.random.default_rng(4)
    m = RidgeModel(Dataset(rng.normal(size=(10, 3)), rng.integers(0, 2, size=10), n_classes=2), lam=0.2)
    w = rng.normal(size=3)
    np.testing.assert_allclose(m.grad(w), _fd_grad(m.loss, w), atol=1e-7)
    np.testing.assert_allclose(m.hessian(w), fd_hessian(m.grad, w), atol=1e-6)
    z = rng.normal(size=3)
    np.testing.assert_allclose(m.hvp(w, z), m.hessian(w) @ z, rtol=1e-12)


def test_quadratic_hvp_examples():
    q = QuadraticModel([[3.0]])
    assert q.hvp(np.zeros(1), np.ones(1)).tolist() == [3.0]
    assert q.hvp(np.zeros(1), np.zeros(1)).tolist() == [0.0]
    with pytest.raises(DimensionError):
        q.hvp(np.zeros(1), np.zeros(2))


def _mlp(seed=0, C=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(15, 4))
    y = np.arange(15) % C
    return ToyMlp(Dataset(X, y, n_classes=C), hidden=5, weight_decay=1e-3)


def test_mlp_grads_match_fd():
    m = _mlp()
    w = m.init_params(1)
    np.testing.assert_allclose(m.grad(w), _fd_grad(m.loss, w), atol=1e-7)
    G = m.grads(w, [2, 9])
    np.testing.assert_allclose(G[1], _fd_grad(lambda v: m.loss_i(v, 9), w), atol=1e-7)
    np.testing.assert_allclose(m.grad(w, [2, 9]), G.mean(axis=0), atol=1e-14)


def test_mlp_softmax_rows_sum_to_one():
    m = _mlp()
    P = m.predict_proba(m.init_params(0) * 30)
    assert np.all(np.abs(P.sum(axis=1) - 1) <= 1e-9)


def test_mlp_proxy_examples():
    m = _mlp(C=2)
    w = np.zeros(m.dim)  # uniform prediction
    g = m.proxy_grads(w, [0])[0]
    assert g.tolist() == [-0.5, 0.5]  # label 0
    # confident and correct: proxy vanishes
    o = m._offsets
    w = np.zeros(m.dim)
    w[o[3]:o[4]] = [50.0, -50.0]
    np.testing.assert_allclose(m.proxy_grads(w, [0])[0], 0.0, atol=1e-12)


def test_mlp_proxy_is_logit_derivative():
    m = _mlp(2)
    w = m.init_params(3)
    for i in (0, 7):
        z0 = m.logits(w, [i])[0]
        y = m.y[i]

        def ce(z):
            return np.log(np.exp(z).sum()) - z[y]

        np.testing.assert_allclose(m.proxy_grads(w, [i])[0], _fd_grad(ce, z0), atol=1e-6)


def test_mlp_proxy_hvp_matches_fd():
    m = _mlp(5)
    w = m.init_params(5)
    z = np.array([0.3, -1.0, 0.4])
    batch = np.arange(6)
    h = 1e-5

    def mean_proxy(shift):
        logits = m.logits(w, batch) + shift
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        return p.mean(axis=0)

    fd = (mean_proxy(h * z) - mean_proxy(-h * z)) / (2 * h)
    np.testing.assert_allclose(m.proxy_hvp(w, z, batch), fd, atol=1e-8)


def test_build_model_unknown():
    with pytest.raises(ValueError):
        build_model("svm", Dataset(np.zeros((2, 1)), np.array([0, 1])))
