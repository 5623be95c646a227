import numpy as np
import pytest

from hesscore.curvature import EmaState, EmaStateError, ema_update_grad, ema_update_hess
from hesscore.data import Dataset
from hesscore.models import LogisticModel, QuadraticModel
from hesscore.numerics import SeededRng
from hesscore.optim import (
    Schedule,
    SingularHessianError,
    conservative_newton_lr,
    diag_newton_step,
    init_state,
    minibatches,
    newton_step,
    schedule_lr,
    sgd_momentum_step,
)


def test_sgd_quadratic_one_step():
    q = QuadraticModel([[1.0]])
    s = sgd_momentum_step(init_state([1.0], momentum=0.0), [0], q, lr=1.0)
    assert s.w.tolist() == [0.0] and s.t == 1


def test_sgd_momentum_converges_to_constant_gradient():
    q = QuadraticModel([[0.0]], centers=[[0.0]])  # zero curvature: gradient is 0
    lin = QuadraticModel([[1.0]], centers=[[-2.0]])  # gradient w + 2
    s = init_state([0.0], momentum=0.9)
    for _ in range(300):
        s = sgd_momentum_step(s, [0], lin, lr=1e-12)
    np.testing.assert_allclose(s.v, [2.0], rtol=1e-8)  # w drifts by ~6e-10 over the run
    assert sgd_momentum_step(init_state([3.0]), [0], q, lr=1.0).w.tolist() == [3.0]


def test_sgd_weighted_normalizer():
    q = QuadraticModel([[1.0]], centers=[[0.0], [4.0]])
    s = init_state([1.0], momentum=0.0)
    # weights 3 and 1: weighted mean gradient = (3*1 + 1*(-3)) / 4 = 0
    assert sgd_momentum_step(s, [0, 1], q, [3.0, 1.0], lr=1.0).w.tolist() == [1.0]
    # a normalizer of 8 halves the step of a weight-sum-4 batch
    s2 = sgd_momentum_step(s, [0], q, [4.0], lr=1.0, normalizer=8.0)
    assert s2.w.tolist() == [0.5]


def test_sgd_errors():
    q = QuadraticModel([[1.0]])
    with pytest.raises(ValueError):
        sgd_momentum_step(init_state([1.0]), [], q)
    with pytest.raises(ValueError):
        sgd_momentum_step(init_state([1.0]), [0], q, lr=0.0)
    with pytest.raises(ValueError):
        init_state([1.0], kind="adam")


@pytest.mark.parametrize("a", [0.01, 1.0, 250.0])
def test_newton_one_step_on_quadratic(a):
    q = QuadraticModel([[a]])
    s = newton_step(init_state([3.0], kind="newton", damping=0.0), [0], q, lr=1.0)
    assert abs(s.w[0]) < 1e-14


def test_newton_zero_gradient_keeps_w():
    q = QuadraticModel(np.eye(2), centers=[[1.0, 2.0]])
    s = newton_step(init_state([1.0, 2.0], kind="newton"), [0], q, lr=1.0)
    assert s.w.tolist() == [1.0, 2.0]


def test_newton_singular_hessian():
    q = QuadraticModel(-np.eye(2))
    with pytest.raises(SingularHessianError):
        newton_step(init_state([1.0, 1.0], kind="newton", damping=0.0), [0], q, lr=1.0)


def test_diag_newton_power_zero_is_sgd_on_average():
    ema = ema_update_hess(ema_update_grad(EmaState(), [2.0, -4.0]), [5.0, 7.0])
    s = diag_newton_step(init_state([1.0, 1.0], kind="diag_newton", hessian_power=0.0), ema, lr=0.5)
    assert s.w.tolist() == [0.0, 3.0]
    s1 = diag_newton_step(init_state([1.0, 1.0], kind="diag_newton", delta_floor=1e-300), ema, lr=1.0)
    np.testing.assert_allclose(s1.w, [1 - 2 / 5, 1 + 4 / 7])


def test_diag_newton_needs_populated_average():
    with pytest.raises(EmaStateError):
        diag_newton_step(init_state([1.0], kind="diag_newton"), ema_update_grad(EmaState(), [1.0]), lr=1.0)


def test_schedule_examples():
    assert schedule_lr(Schedule("exp_decay", 0.1, 1.0), 7) == 0.1
    assert schedule_lr(Schedule("exp_decay", 0.1, 0.5), 2) == pytest.approx(0.025, rel=1e-15)
    assert schedule_lr(Schedule("constant", 0.1, warmup_epochs=20), 10) == pytest.approx(0.05, rel=1e-15)
    step = Schedule("step_decay", 1.0, milestones=(3, 6), factor=0.1)
    assert [schedule_lr(step, e) for e in (0, 3, 6)] == pytest.approx([1.0, 0.1, 0.01])
    assert schedule_lr(Schedule("constant", 0.1, warmup_epochs=5), 0, 0, 10) > 0


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule("cosine")
    with pytest.raises(ValueError):
        Schedule("constant", lr0=0.0)
    with pytest.raises(ValueError):
        schedule_lr(Schedule(), -1)


def test_conservative_newton_is_monotone():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 5))
    y = (X[:, 0] + 0.5 * rng.normal(size=200) > 0).astype(int)
    m = LogisticModel(Dataset(X, y), mu=0.1)
    lr = conservative_newton_lr(m)
    s = init_state(np.zeros(m.dim), kind="newton")
    losses = [m.loss(s.w)]
    for _ in range(30):
        s = newton_step(s, np.arange(m.n), m, lr=lr)
        losses.append(m.loss(s.w))
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_conservative_lr_needs_mu():
    m = LogisticModel(Dataset(np.eye(2), np.array([0, 1])), mu=0.0)
    with pytest.raises(ValueError):
        conservative_newton_lr(m)


def test_minibatches_partition():
    out = minibatches(np.arange(10, 20), np.arange(10.0), 4, SeededRng(0))
    assert [len(b) for b, _ in out] == [4, 4, 2]
    idx = np.concatenate([b for b, _ in out])
    wt = np.concatenate([w for _, w in out])
    assert sorted(idx.tolist()) == list(range(10, 20))
    assert np.array_equal(wt, idx - 10.0)
