"""First- and second-order update rules on full data or weighted coresets."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .curvature import EmaState, EmaStateError
from .models import Model

OPTIMIZERS = ("sgd", "newton", "diag_newton")


class SingularHessianError(ArithmeticError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Learning-rate schedule.

    ``kind`` is ``constant``, ``exp_decay`` (``lr0 * decay**epoch``) or
    ``step_decay`` (multiply by ``factor`` at each milestone). A positive
    ``warmup_epochs`` scales any of them by ``min(1, epoch / warmup_epochs)``,
    floored at one step's worth so the rate stays positive.
    """

    kind: str = "constant"
    lr0: float = 0.1
    decay: float = 1.0
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.kind not in ("constant", "exp_decay", "step_decay"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.kind == "exp_decay" and not 0 < self.decay <= 1:
            raise ValueError("exp_decay needs decay in (0, 1]")
        if self.kind == "step_decay" and not self.factor > 0:
            raise ValueError("step_decay factor must be positive")


def schedule_lr(schedule: Schedule, epoch: int, step: int = 0, steps_per_epoch: int = 1) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    if schedule.kind == "constant":
        lr = schedule.lr0
    elif schedule.kind == "exp_decay":
        lr = schedule.lr0 * schedule.decay**epoch
    else:
        lr = schedule.lr0 * schedule.factor ** sum(epoch >= m for m in schedule.milestones)
    if schedule.warmup_epochs > 0:
        progress = epoch + step / max(steps_per_epoch, 1)
        ramp = min(1.0, progress / schedule.warmup_epochs)
        lr *= max(ramp, 1.0 / (schedule.warmup_epochs * max(steps_per_epoch, 1)))
    return lr


@dataclass(frozen=True)
class OptimizerState:
    w: np.ndarray
    v: np.ndarray
    t: int = 0
    kind: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    hessian_power: float = 1.0
    damping: float | None = None  # None: 1e-8 * trace(H) / d
    delta_floor: float = 1e-12

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.v.shape != self.w.shape:
            raise ValueError("momentum buffer must match parameter shape")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


def init_state(w0, kind: str = "sgd", **hyper) -> OptimizerState:
    w0 = np.array(w0, dtype=np.float64)
    return OptimizerState(w=w0, v=np.zeros_like(w0), kind=kind, **hyper)


def _batch(batch, weights):
    idx = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if idx.size == 0:
        raise ValueError("empty batch")
    wt = np.ones(len(idx)) if weights is None else np.asarray(weights, dtype=np.float64)
    return idx, wt


def _check_lr(lr: float) -> float:
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    return lr


def sgd_momentum_step(
    state: OptimizerState, batch, model: Model, weights=None, lr: float | None = None, normalizer: float | None = None
) -> OptimizerState:
    """``v <- beta v + (1 - beta) g``, ``w <- w - lr v``.

    ``g = sum_b gamma_i g_i / normalizer``; the normalizer defaults to the
    batch's own weight sum. Mini-batches drawn from a coreset should pass
    ``len(batch) * mean coreset weight`` to keep ``g`` unbiased.
    """
    idx, wt = _batch(batch, weights)
    lr = _check_lr(state.lr if lr is None else lr)
    g = model.grad(state.w, idx, wt)
    if normalizer is not None:
        g = g * (wt.sum() / normalizer)
    v = state.momentum * state.v + (1.0 - state.momentum) * g
    return replace(state, w=state.w - lr * v, v=v, t=state.t + 1)


def newton_step(state: OptimizerState, batch, model: Model, weights=None, lr: float | None = None) -> OptimizerState:
    """``w <- w - lr (H + damping I)^{-1} g`` with weighted batch averages, solved by Cholesky."""
    idx, wt = _batch(batch, weights)
    lr = _check_lr(state.lr if lr is None else lr)
    g = model.grad(state.w, idx, wt)
    H = model.hessian(state.w, idx, wt)
    d = H.shape[0]
    damping = state.damping if state.damping is not None else 1e-8 * max(np.trace(H), 0.0) / d
    try:
        factor = cho_factor(H + damping * np.eye(d))
    except LinAlgError as exc:
        raise SingularHessianError(f"Hessian not positive definite after damping {damping:g}") from exc
    step = cho_solve(factor, g)
    if not np.all(np.isfinite(step)):
        raise SingularHessianError("Newton direction is not finite")
    return replace(state, w=state.w - lr * step, v=step, t=state.t + 1)


def diag_newton_step(state: OptimizerState, ema: EmaState, lr: float | None = None) -> OptimizerState:
    """``w <- w - lr * g_bar / (h_bar + delta) ** k`` from already-updated moving averages."""
    if not (ema.has_grad and ema.has_hess):
        raise EmaStateError("diag-Newton needs populated gradient and Hessian averages")
    lr = _check_lr(state.lr if lr is None else lr)
    g_bar, h_bar = ema.g_bar, ema.h_bar
    if g_bar.shape != state.w.shape or h_bar.shape != state.w.shape:
        raise ValueError("moving averages must match the parameter shape")
    k = state.hessian_power
    step = g_bar if k == 0 else g_bar / (h_bar + state.delta_floor) ** k
    return replace(state, w=state.w - lr * step, v=step, t=state.t + 1)


def conservative_newton_lr(model: Model) -> float:
    """Step size ``alpha / beta`` from the model's strong-convexity and smoothness bounds."""
    alpha, beta = model.smoothness_bounds()
    if alpha <= 0:
        raise ValueError("conservative step needs a strongly convex model (mu > 0)")
    return alpha / beta


def minibatches(indices, weights, batch_size: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle a weighted index set and cut it into consecutive batches."""
    indices = np.asarray(indices, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    perm = rng.permutation(len(indices))
    out = []
    for start in range(0, len(indices), batch_size):
        sl = perm[start:start + batch_size]
        out.append((indices[sl], weights[sl]))
    return out
