"""Brute-force property checks shared by ``hesscore verify`` and the test suite.

Every check takes a seed, its instance counts and a ``fault`` flag. With
``fault=True`` one sign inside the check is flipped so the check must fail,
which exercises the failure path of the runner.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import coreset as cs
from .curvature import EmaState, PreconditionerConfig, ema_update_grad, hutchinson_diag, hutchinson_diag_matrix, selection_features
from .data import Dataset
from .models import LogisticModel, QuadraticModel
from .numerics import SeededRng


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _sign(fault: bool) -> float:
    return -1.0 if fault else 1.0


def _random_points(rng: SeededRng, n: int, dim: int, grid: bool) -> np.ndarray:
    if grid:
        return rng.integers(-3, 4, size=(n, dim)).astype(np.float64)
    return rng.normal(size=(n, dim))


def check_submodularity(seed: int = 0, instances: int = 200, chains: int = 20, fault: bool = False) -> CheckResult:
    """Diminishing returns ``F(e|S) >= F(e|T)`` and monotonicity ``F(S) <= F(T)`` on random chains ``S <= T``."""
    rng = SeededRng(seed)
    tested = 0
    for k in range(instances):
        n = int(rng.integers(2, 11))
        V = _random_points(rng, n, int(rng.integers(1, 5)), grid=bool(k % 2))
        dp = cs._Distances(V).d_phantom
        for _ in range(chains):
            perm = rng.permutation(n)
            e = int(perm[0])
            t = int(rng.integers(0, n))  # |T|, drawn from the other n - 1 points
            s = int(rng.integers(0, t + 1))
            T = sorted(perm[1:1 + t].tolist())
            S = sorted(perm[1:1 + s].tolist())
            gs = cs.marginal_gain(V, S, e, dp)
            gt = cs.marginal_gain(V, T, e, dp)
            _, fs = cs.facility_objective(V, S, dp)
            _, ft = cs.facility_objective(V, T, dp)
            tested += 1
            if not _sign(fault) * (gs - gt) >= 0:
                return CheckResult("submodularity", False, f"instance {k}: F(e|S)={gs!r} < F(e|T)={gt!r}")
            if not fs <= ft:
                return CheckResult("submodularity", False, f"instance {k}: F(S)={fs!r} > F(T)={ft!r}")
    return CheckResult("submodularity", True, f"{tested} chains on {instances} instances")


def _min_cover_size(D: np.ndarray, eps: float) -> int:
    n = D.shape[0]
    for size in range(1, n + 1):
        for S in itertools.combinations(range(n), size):
            if D[list(S)].min(axis=0).sum() <= eps:
                return size
    return n


def check_cover_guarantee(seed: int = 0, instances: int = 50, max_n: int = 12, fault: bool = False) -> CheckResult:
    """Greedy cover size against the brute-force optimum: ``|S| <= (1 + ln max_e F(e|{})) |S*|``."""
    rng = SeededRng(seed)
    worst = 0.0
    for k in range(instances):
        n = int(rng.integers(3, max_n + 1))
        V = _random_points(rng, n, int(rng.integers(1, 4)), grid=True)
        dist = cs._Distances(V)
        # a target met by some random small subset, so the cover problem is feasible and non-trivial
        probe = rng.choice(n, size=int(rng.integers(1, min(4, n) + 1)), replace=False)
        eps = float(dist.D[probe].min(axis=0).sum())
        greedy = cs.greedy_select(V, epsilon=eps, mode="naive")
        opt = _min_cover_size(dist.D, eps)
        top = max(cs.marginal_gain(V, [], e, dist.d_phantom) for e in range(n))
        bound = (1.0 + math.log(top)) * opt
        worst = max(worst, len(greedy) / bound)
        if not _sign(fault) * (bound - len(greedy)) >= 0:
            return CheckResult("cover_guarantee", False, f"instance {k}: |S|={len(greedy)} > bound {bound:.3f} (|S*|={opt})")
    return CheckResult("cover_guarantee", True, f"{instances} instances, worst |S|/bound = {worst:.3f}")


def check_lazy_equals_naive(seed: int = 0, instances: int = 100, fault: bool = False) -> CheckResult:
    """Lazy and naive greedy return the same index sequence and weights, ties included."""
    rng = SeededRng(seed)
    for k in range(instances):
        n = int(rng.integers(2, 61))
        V = rng.normal(size=(n, int(rng.integers(1, 5))))
        if k % 3 == 0:
            V = np.round(V, 1)  # coarse values create gain ties
        budget = int(rng.integers(1, n + 1))
        a = cs.greedy_select(V, budget=budget, mode="naive")
        b = cs.greedy_select(V, budget=budget, mode="lazy")
        wb = b.weights * _sign(fault)
        if not (np.array_equal(a.indices, b.indices) and np.array_equal(a.weights, wb)):
            return CheckResult("lazy_equals_naive", False, f"instance {k}: {a.indices.tolist()} vs {b.indices.tolist()}")
    return CheckResult("lazy_equals_naive", True, f"{instances} instances")


def _small_logistic(rng: SeededRng, n: int, d: int, mu: float) -> LogisticModel:
    X = rng.normal(size=(n, d))
    y = (X @ rng.normal(size=d) + 0.5 * rng.normal(size=n) > 0).astype(np.int64)
    y[:2] = (0, 1)  # both classes present
    return LogisticModel(Dataset(X, y, "probe"), mu=mu)


def check_craig_reduction(seed: int = 0, instances: int = 50, fault: bool = False) -> CheckResult:
    """Preconditioned selection with a unit preconditioner equals gradient-only selection."""
    rng = SeededRng(seed)
    for k in range(instances):
        model = _small_logistic(rng, int(rng.integers(10, 80)), int(rng.integers(1, 6)), 0.01)
        w = rng.normal(size=model.dim)
        cfg = PreconditionerConfig(beta1=0.0, unit_preconditioner=True)
        ema = ema_update_grad(EmaState(beta1=0.0), model.proxy_grads(w))
        pre = selection_features(model, w, ema, cfg, "preconditioned")
        plain = selection_features(model, w, None, cfg, "gradient_only")
        frac = float(rng.uniform(0.05, 0.6))
        a = cs.per_class_select(model.ds, pre, frac)
        b = cs.per_class_select(model.ds, plain, frac)
        wb = b.weights * _sign(fault)
        if not (np.array_equal(a.indices, b.indices) and np.array_equal(a.weights, wb)):
            return CheckResult("craig_reduction", False, f"instance {k} differs")
    return CheckResult("craig_reduction", True, f"{instances} instances")


def _random_symmetric(rng: SeededRng, d: int) -> np.ndarray:
    A = rng.normal(size=(d, d))
    return (A + A.T) / 2.0


def check_hutchinson(
    seed: int = 0, matrices: int = 20, draws: int = 10_000, sampled_matrices: int = 5, fault: bool = False
) -> CheckResult:
    """Full sign enumeration recovers the diagonal; sampled estimates stay within 5 standard errors."""
    rng = SeededRng(seed)
    worst_enum = 0.0
    for k in range(matrices):
        d = 1 + k % 10
        H = _random_symmetric(rng, d)
        est = hutchinson_diag_matrix(H, None) * _sign(fault)
        err = float(np.abs(est - np.diag(H)).max())
        worst_enum = max(worst_enum, err)
        if err > 1e-12:
            return CheckResult("hutchinson", False, f"enumeration error {err:.3g} for d={d}")
    worst_z = 0.0
    for k in range(sampled_matrices):
        H = _random_symmetric(rng, 10)
        model = QuadraticModel(H)
        est = hutchinson_diag(model, np.zeros(10), [0], draws, rng) * _sign(fault)
        # z_i (Hz)_i = H_ii + sum_{j != i} H_ij z_i z_j, so its variance is the off-diagonal row energy
        se = np.sqrt(((H**2).sum(axis=1) - np.diag(H) ** 2) / draws)
        z = float((np.abs(est - np.diag(H)) / se).max())
        worst_z = max(worst_z, z)
        if z > 5.0:
            return CheckResult("hutchinson", False, f"sampled estimate {z:.2f} standard errors off")
    return CheckResult("hutchinson", True, f"enumeration max err {worst_enum:.2g}, sampled max {worst_z:.2f} se")


def fd_hessian(grad: Callable[[np.ndarray], np.ndarray], w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of an analytic gradient, symmetrized."""
    p = len(w)
    H = np.empty((p, p))
    for k in range(p):
        e = np.zeros(p)
        e[k] = h
        H[:, k] = (grad(w + e) - grad(w - e)) / (2 * h)
    return (H + H.T) / 2.0


def check_logistic_hessian(seed: int = 0, probes: int = 100, tol: float = 1e-5, fault: bool = False) -> CheckResult:
    """Analytic per-example logistic Hessians against finite differences of the gradient."""
    rng = SeededRng(seed)
    worst = 0.0
    for k in range(probes):
        mu = (0.0, 0.1)[k % 2]
        model = _small_logistic(rng, 8, int(rng.integers(1, 11)), mu)
        w = rng.normal(size=model.dim)
        i = int(rng.integers(0, model.n))
        H = model.hess_i(w, i) * _sign(fault)
        Hfd = fd_hessian(lambda v: model.grad_i(v, i), w)
        dev = float(np.abs(H - Hfd).max())
        worst = max(worst, dev)
        if dev > tol:
            return CheckResult("logistic_hessian", False, f"probe {k}: deviation {dev:.3g} > {tol:g}")
    return CheckResult("logistic_hessian", True, f"{probes} probes, max deviation {worst:.2g}")


def check_sum_error_bound(seed: int = 0, instances: int = 50, fault: bool = False) -> CheckResult:
    """Weighted-sum error of every greedy selection is at most its cover cost, and weights sum to n."""
    rng = SeededRng(seed)
    for k in range(instances):
        n = int(rng.integers(3, 200))
        V = rng.normal(size=(n, int(rng.integers(1, 8))))
        core = cs.greedy_select(V, budget=int(rng.integers(1, n)))
        err = cs.weighted_sum_error(V, core)
        if not err <= core.residual * _sign(fault):
            return CheckResult("sum_error_bound", False, f"instance {k}: error {err!r} > L(S) {core.residual!r}")
        if core.weights.sum() != n:
            return CheckResult("sum_error_bound", False, f"instance {k}: weights sum to {core.weights.sum()}, not {n}")
    return CheckResult("sum_error_bound", True, f"{instances} instances")


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "submodularity": check_submodularity,
    "cover_guarantee": check_cover_guarantee,
    "lazy_equals_naive": check_lazy_equals_naive,
    "craig_reduction": check_craig_reduction,
    "hutchinson": check_hutchinson,
    "logistic_hessian": check_logistic_hessian,
    "sum_error_bound": check_sum_error_bound,
}


def run_all(seed: int = 0, fault: bool = False) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        try:
            res = fn(seed=seed, fault=fault)
        except Exception as exc:  # a crash is a failed property, not a crashed runner
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
