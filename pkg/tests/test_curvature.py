import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hesscore.curvature import (
    EmaState,
    EmaStateError,
    PreconditionerConfig,
    SelectionFeatures,
    ema_update_grad,
    ema_update_hess,
    hutchinson_diag,
    hutchinson_diag_matrix,
    precondition,
    refresh_curvature,
    selection_features,
)
from hesscore.data import Dataset
from hesscore.models import LogisticModel, QuadraticModel, ToyMlp
from hesscore.numerics import DimensionError, SeededRng


def test_hutchinson_diagonal_matrix_is_exact_per_sample():
    q = QuadraticModel(np.diag([2.0, 3.0]))
    assert hutchinson_diag(q, np.zeros(2), [0], 1, SeededRng(0)).tolist() == [2.0, 3.0]


def test_hutchinson_enumeration_example():
    assert hutchinson_diag_matrix([[2.0, 1.0], [1.0, 3.0]], None).tolist() == [2.0, 3.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8).flatmap(lambda d: arrays(np.float64, (d, d), elements=st.floats(-10, 10))))
def test_hutchinson_enumeration_recovers_diagonal(A):
    H = (A + A.T) / 2
    np.testing.assert_allclose(hutchinson_diag_matrix(H, None), np.diag(H), atol=1e-12)


def test_hutchinson_sampled_within_five_se():
    rng = SeededRng(11)
    A = np.random.default_rng(11).normal(size=(10, 10))
    H = (A + A.T) / 2
    est = hutchinson_diag(QuadraticModel(H), np.zeros(10), [0], 10_000, rng)
    se = np.sqrt(((H**2).sum(axis=1) - np.diag(H) ** 2) / 10_000)
    assert np.all(np.abs(est - np.diag(H)) <= 5 * se)


def test_hutchinson_empty_batch():
    with pytest.raises(ValueError):
        hutchinson_diag(QuadraticModel([[1.0]]), np.zeros(1), [], 1, SeededRng(0))


def test_hutchinson_proxy_space_shape():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(20, 3)), np.arange(20) % 3, n_classes=3)
    m = ToyMlp(ds, hidden=4)
    est = hutchinson_diag(m, m.init_params(0), np.arange(20), 4, SeededRng(0), proxy=True)
    assert est.shape == (3,)


def test_ema_grad_examples():
    s = ema_update_grad(EmaState(beta1=0.9), [1.5, -2.0])
    assert s.g_bar.tolist() == [1.5, -2.0]
    s = EmaState(beta1=0.9)
    for _ in range(25):
        s = ema_update_grad(s, [0.7])
    np.testing.assert_allclose(s.g_bar, [0.7], rtol=1e-14)
    s = ema_update_grad(ema_update_grad(EmaState(beta1=0.5), [0.0]), [1.0])
    np.testing.assert_allclose(s.g_bar, [2.0 / 3.0], rtol=1e-15)


def test_ema_hess_examples():
    assert ema_update_hess(EmaState(), [-3.0]).h_bar.tolist() == [3.0]
    s = EmaState()
    for _ in range(10):
        s = ema_update_hess(s, [-1.5, 2.0])
    np.testing.assert_allclose(s.h_bar, [1.5, 2.0], rtol=1e-14)
    s = ema_update_hess(ema_update_hess(EmaState(beta2=0.9), [1.0]), [2.0])
    expect = math.sqrt((0.9 * 1 + 4) * 0.1 / (1 - 0.81))
    np.testing.assert_allclose(s.h_bar, [expect], rtol=1e-15)
    assert abs(expect - 1.6059) < 1e-4


def test_ema_beta1_zero_keeps_latest():
    s = EmaState(beta1=0.0)
    for g in ([1.0], [4.0], [-2.0]):
        s = ema_update_grad(s, g)
    assert s.g_bar.tolist() == [-2.0]


def test_ema_errors():
    with pytest.raises(EmaStateError):
        EmaState().g_bar
    with pytest.raises(EmaStateError):
        EmaState().h_bar
    with pytest.raises(DimensionError):
        ema_update_grad(ema_update_grad(EmaState(), [1.0]), [1.0, 2.0])
    with pytest.raises(ValueError):
        EmaState(beta1=1.0)


def test_precondition_examples():
    assert precondition([2.0, 4.0], [2.0, 4.0], k=1, delta_floor=0).tolist() == [1.0, 1.0]
    g = np.array([3.0, -1.0])
    assert np.array_equal(precondition(g, [7.0, 9.0], k=0), g)
    out = precondition([1.0], [0.0], k=1, delta_floor=1e-12)
    assert np.isfinite(out).all() and out[0] == pytest.approx(1e12)
    np.testing.assert_allclose(precondition([4.0], [4.0], k=0.5, delta_floor=0), [2.0])
    with pytest.raises(DimensionError):
        precondition([1.0, 2.0], [1.0])


def _two_example_model():
    ds = Dataset(np.array([[1.0, 2.0], [-1.0, 0.5]]), np.array([0, 1]))
    return LogisticModel(ds, mu=0.1)


def test_preconditioned_features_halve_with_curvature_two():
    m = _two_example_model()
    G = m.proxy_grads(np.zeros(m.dim))
    ema = ema_update_hess(ema_update_grad(EmaState(), G), np.full(m.dim, 2.0))
    cfg = PreconditionerConfig(delta_floor=1e-300)
    f = selection_features(m, np.zeros(m.dim), ema, cfg, "preconditioned")
    np.testing.assert_allclose(f.vectors, G / 2.0, rtol=1e-15)


def test_selection_feature_modes():
    m = _two_example_model()
    w = np.array([0.2, -0.4, 0.1])
    cfg = PreconditionerConfig()
    assert np.array_equal(selection_features(m, w, None, cfg, "gradient_only").vectors, m.proxy_grads(w))
    assert np.array_equal(selection_features(m, w, None, cfg, "raw_feature").vectors, m.ds.features)
    with pytest.raises(EmaStateError):
        selection_features(m, w, None, cfg, "preconditioned")
    with pytest.raises(EmaStateError):
        selection_features(m, w, ema_update_grad(EmaState(), m.proxy_grads(w)), cfg, "preconditioned")
    with pytest.raises(ValueError):
        selection_features(m, w, None, cfg, "bogus")


def test_unit_preconditioner_returns_smoothed_gradients():
    m = _two_example_model()
    w = np.array([0.2, -0.4, 0.1])
    cfg = PreconditionerConfig(beta1=0.0, unit_preconditioner=True)
    ema = ema_update_grad(EmaState(beta1=0.0), m.proxy_grads(w))
    f = selection_features(m, w, ema, cfg, "preconditioned")
    assert np.array_equal(f.vectors, m.proxy_grads(w))


def test_analytic_options_match_direct_solves():
    rng = np.random.default_rng(3)
    ds = Dataset(rng.normal(size=(9, 3)), np.arange(9) % 2)
    m = LogisticModel(ds, mu=0.05)
    w = rng.normal(size=m.dim)
    G = m.proxy_grads(w)
    ema = ema_update_grad(EmaState(beta1=0.0), G)
    diag = selection_features(m, w, ema, PreconditionerConfig(curvature="analytic_diag", beta1=0.0), "preconditioned")
    np.testing.assert_allclose(diag.vectors, G / (m.hess_diags(w) + 1e-12))
    full = selection_features(m, w, ema, PreconditionerConfig(curvature="analytic_full", beta1=0.0), "preconditioned")
    H = m.hessians(w)
    expect = np.stack([np.linalg.solve(H[i], G[i]) for i in range(m.n)])
    np.testing.assert_allclose(full.vectors, expect, rtol=1e-8, atol=1e-10)


def test_refresh_curvature_populates_average():
    m = _two_example_model()
    ema = refresh_curvature(m, np.zeros(m.dim), EmaState(), PreconditionerConfig(hessian_batch=5), SeededRng(0), proxy=False)
    assert ema.has_hess and ema.h_bar.shape == (m.dim,)


def test_selection_features_rows_keep_global_ids():
    f = SelectionFeatures(np.arange(12.0).reshape(6, 2), "x")
    sub = f.rows([1, 4]).rows([1])
    assert sub.index.tolist() == [4] and sub.vectors.tolist() == [[8.0, 9.0]]


def test_preconditioner_config_validation():
    with pytest.raises(ValueError):
        PreconditionerConfig(delta_floor=0)
    with pytest.raises(ValueError):
        PreconditionerConfig(curvature="kfac")
    with pytest.raises(ValueError):
        PreconditionerConfig(hessian_power=2)
