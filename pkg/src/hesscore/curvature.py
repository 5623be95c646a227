"""Hessian-diagonal estimation, moving averages, and per-example selection features."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .models import Model
from .numerics import DimensionError, SeededRng, deterministic_sum, rademacher

MODES = ("preconditioned", "gradient_only", "raw_feature")


class EmaStateError(RuntimeError):
    """Raised when an average is read before it has seen any observation."""


def hutchinson_diag(model: Model, w, batch, samples: int, rng: SeededRng, proxy: bool = False) -> np.ndarray:
    """Average of ``z * (H z)`` over Rademacher probes ``z``.

    ``proxy=True`` estimates the curvature in the model's gradient-proxy
    space (``model.proxy_hvp``) instead of parameter space.
    """
    batch = np.atleast_1d(np.asarray(batch, dtype=np.int64))
    if batch.size == 0:
        raise ValueError("hutchinson_diag needs a non-empty batch")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    hvp = model.proxy_hvp if proxy else model.hvp
    dim = model.proxy_dim if proxy else model.dim
    Z = rademacher(rng, dim, size=samples)
    est = deterministic_sum((z * hvp(w, z, batch) for z in Z), dim=dim)
    return est / samples


def hutchinson_diag_matrix(H, samples: int | None, rng: SeededRng | None = None) -> np.ndarray:
    """Hutchinson estimate for an explicit symmetric matrix.

    ``samples=None`` enumerates all ``2**d`` sign vectors, which recovers
    the diagonal exactly.
    """
    H = np.asarray(H, dtype=np.float64)
    d = H.shape[0]
    if samples is None:
        if d > 20:
            raise ValueError("full sign enumeration is limited to d <= 20")
        bits = (np.arange(2**d)[:, None] >> np.arange(d)) & 1
        Z = 2.0 * bits - 1.0
    else:
        Z = rademacher(rng, d, size=samples)
    return np.mean(Z * (Z @ H.T), axis=0)


@dataclass(frozen=True)
class EmaState:
    """Bias-corrected moving averages of gradients and Hessian diagonals.

    Averages can be vectors or ``(n, p)`` blocks (one row per example).
    Raw weighted sums are stored; the corrected values are derived on read.
    ``beta1 = 0`` disables gradient smoothing (the latest gradient is used).
    """

    beta1: float = 0.9
    beta2: float = 0.999
    t_grad: int = 0
    t_hess: int = 0
    _g_acc: np.ndarray | None = field(default=None, repr=False)
    _h_acc: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must lie in [0, 1)")
        if not 0.0 < self.beta2 < 1.0:
            raise ValueError("beta2 must lie in (0, 1)")

    @property
    def g_bar(self) -> np.ndarray:
        if self._g_acc is None:
            raise EmaStateError("gradient average has no observations yet")
        return self._g_acc / (1.0 - self.beta1**self.t_grad)

    @property
    def h_bar(self) -> np.ndarray:
        if self._h_acc is None:
            raise EmaStateError("Hessian average has no observations yet")
        return np.sqrt(self._h_acc / (1.0 - self.beta2**self.t_hess))

    @property
    def has_grad(self) -> bool:
        return self._g_acc is not None

    @property
    def has_hess(self) -> bool:
        return self._h_acc is not None


def _accumulate(acc, x, beta):
    x = np.asarray(x, dtype=np.float64)
    if acc is None:
        return (1.0 - beta) * x
    if acc.shape != x.shape:
        raise DimensionError(f"average has shape {acc.shape}, update has {x.shape}")
    return beta * acc + (1.0 - beta) * x


def ema_update_grad(state: EmaState, g_hat) -> EmaState:
    acc = _accumulate(state._g_acc, g_hat, state.beta1)
    return replace(state, t_grad=state.t_grad + 1, _g_acc=acc)


def ema_update_hess(state: EmaState, diag_h) -> EmaState:
    diag_h = np.asarray(diag_h, dtype=np.float64)
    acc = _accumulate(state._h_acc, diag_h * diag_h, state.beta2)
    return replace(state, t_hess=state.t_hess + 1, _h_acc=acc)


def precondition(g, h_bar, k: float = 1.0, delta_floor: float = 1e-12) -> np.ndarray:
    """Elementwise ``g / (h_bar + delta_floor) ** k``; broadcasts a shared ``h_bar`` over rows of ``g``."""
    g = np.asarray(g, dtype=np.float64)
    h_bar = np.asarray(h_bar, dtype=np.float64)
    if h_bar.shape[-1] != g.shape[-1]:
        raise DimensionError(f"gradient width {g.shape[-1]} vs curvature width {h_bar.shape[-1]}")
    if delta_floor < 0:
        raise ValueError("delta_floor must be non-negative")
    if k == 0:
        return g.copy()
    return g / (h_bar + delta_floor) ** k


@dataclass
class PreconditionerConfig:
    delta_floor: float = 1e-12
    hessian_batch: int = 64
    hutchinson_samples: int = 1
    hessian_power: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    # hutchinson: one diagonal shared by all examples, estimated on a random batch
    # analytic_diag: each example preconditioned by its own analytic Hessian diagonal
    # analytic_full: each example preconditioned by its own full Hessian (solve)
    curvature: str = "hutchinson"
    unit_preconditioner: bool = False

    def __post_init__(self):
        if not self.delta_floor > 0:
            raise ValueError("delta_floor must be positive")
        if self.hutchinson_samples < 1 or self.hessian_batch < 1:
            raise ValueError("hutchinson_samples and hessian_batch must be >= 1")
        if not 0.0 <= self.hessian_power <= 1.0:
            raise ValueError("hessian_power must lie in [0, 1]")
        if self.curvature not in ("hutchinson", "analytic_diag", "analytic_full"):
            raise ValueError(f"unknown curvature source {self.curvature!r}")


@dataclass
class SelectionFeatures:
    vectors: np.ndarray  # (n, p)
    mode: str
    index: np.ndarray | None = None  # global ids of the rows; None means 0..n-1

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2:
            raise DimensionError("selection features must be an (n, p) matrix")
        if self.index is not None:
            self.index = np.asarray(self.index, dtype=np.int64)
            if self.index.shape != (self.vectors.shape[0],):
                raise DimensionError("index must have one id per feature row")

    @property
    def n(self) -> int:
        return self.vectors.shape[0]

    def rows(self, idx) -> "SelectionFeatures":
        idx = np.asarray(idx, dtype=np.int64)
        glob = idx if self.index is None else self.index[idx]
        return SelectionFeatures(self.vectors[idx], self.mode, glob)


def refresh_curvature(
    model: Model, w, ema: EmaState, cfg: PreconditionerConfig, rng: SeededRng, proxy: bool = True
) -> EmaState:
    """Fold one fresh Hutchinson estimate (over a random batch of ``cfg.hessian_batch``) into ``ema``."""
    size = min(cfg.hessian_batch, model.n)
    batch = np.sort(rng.choice(model.n, size=size, replace=False))
    diag = hutchinson_diag(model, w, batch, cfg.hutchinson_samples, rng, proxy=proxy)
    return ema_update_hess(ema, diag)


def selection_features(
    model: Model,
    w,
    ema: EmaState | None,
    cfg: PreconditionerConfig,
    mode: str = "preconditioned",
    dataset=None,
) -> SelectionFeatures:
    """Per-example vectors whose pairwise distances drive greedy selection.

    * ``preconditioned``: the smoothed proxy gradients in ``ema.g_bar`` (one
      row per example) scaled by inverse curvature. With
      ``cfg.curvature == "hutchinson"`` the shared ``ema.h_bar`` is used;
      the analytic options use each example's own Hessian at ``w``.
    * ``gradient_only``: raw proxy gradients at ``w``.
    * ``raw_feature``: the dataset's feature rows.
    """
    if mode not in MODES:
        raise ValueError(f"unknown selection mode {mode!r}")
    if mode == "raw_feature":
        ds = dataset if dataset is not None else getattr(model, "ds", None)
        if ds is None:
            raise ValueError("raw_feature mode needs a dataset")
        return SelectionFeatures(ds.features, mode)
    if mode == "gradient_only":
        return SelectionFeatures(model.proxy_grads(w), mode)

    if ema is None or not ema.has_grad:
        raise EmaStateError("preconditioned features need a populated gradient average")
    G = ema.g_bar
    if G.ndim != 2 or G.shape[0] != model.n:
        raise DimensionError("gradient average must hold one row per example")
    if cfg.unit_preconditioner:
        return SelectionFeatures(G.copy(), mode)
    k = cfg.hessian_power
    if cfg.curvature == "hutchinson":
        if not ema.has_hess:
            raise EmaStateError("preconditioned features need a populated Hessian average")
        return SelectionFeatures(precondition(G, ema.h_bar, k, cfg.delta_floor), mode)
    if cfg.curvature == "analytic_diag":
        D = np.abs(model.hess_diags(w))
        return SelectionFeatures(precondition(G, D, k, cfg.delta_floor), mode)
    return SelectionFeatures(_full_precondition(model, w, G, k, cfg.delta_floor), mode)


def _full_precondition(model: Model, w, G, k: float, delta_floor: float, chunk: int = 4096) -> np.ndarray:
    """Rows ``H_i^{-k} g_i`` with per-example analytic Hessians (symmetric eigen-solve)."""
    out = np.empty_like(G)
    for start in range(0, model.n, chunk):
        idx = np.arange(start, min(start + chunk, model.n))
        H = model.hessians(w, idx)
        if k == 1:
            # plain solve; the Hessians of convex models are already PSD
            H[:, np.arange(H.shape[1]), np.arange(H.shape[1])] += delta_floor
            out[idx] = np.linalg.solve(H, G[idx][..., None])[..., 0]
            continue
        evals, evecs = np.linalg.eigh(H)
        scale = (np.maximum(evals, 0.0) + delta_floor) ** (-k)
        coef = np.einsum("mji,mj->mi", evecs, G[idx]) * scale
        out[idx] = np.einsum("mij,mj->mi", evecs, coef)
    return out
