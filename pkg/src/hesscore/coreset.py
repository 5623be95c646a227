"""Weighted coreset selection by greedy facility-location cover.

For feature rows ``v_1..v_n`` and a selected set ``S``, the cover cost is
``L(S) = sum_i min_{j in S} |v_i - v_j|``. Adding a phantom element whose
distance to every point is ``d_phantom`` (at least the largest pairwise
distance) gives the monotone submodular ``F(S) = C1 - L(S + phantom)`` with
``C1 = n * d_phantom``. Greedy maximization of ``F`` picks medoids; each
medoid's weight is the number of points closest to it.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial.distance import cdist

from .curvature import SelectionFeatures
from .data import Dataset
from .numerics import SeededRng, as_rng, largest_remainder

log = logging.getLogger(__name__)

GREEDY_MODES = ("naive", "lazy", "stochastic")


@dataclass
class Coreset:
    indices: np.ndarray  # global example ids, selection order within each class
    weights: np.ndarray  # aligned with indices
    residual: float  # achieved L(S), summed over classes
    per_class: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    class_residuals: dict[int, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape:
            raise ValueError("indices and weights must align")
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("coreset indices must be distinct")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def full(cls, ds: Dataset) -> "Coreset":
        per_class = {c: (ix.copy(), np.ones(len(ix))) for c, ix in enumerate(ds.class_index) if len(ix)}
        return _merge(per_class, {c: 0.0 for c in per_class})


def _merge(per_class, residuals, warnings=()) -> Coreset:
    classes = sorted(per_class)
    if classes:
        idx = np.concatenate([per_class[c][0] for c in classes])
        wts = np.concatenate([per_class[c][1] for c in classes])
    else:
        idx, wts = np.zeros(0, dtype=np.int64), np.zeros(0)
    return Coreset(idx, wts, float(sum(residuals.values())), dict(per_class), dict(residuals), list(warnings))


# ------------------------------------------------------------------ distances


def _as_rows(feats) -> np.ndarray:
    """Feature matrix from :class:`SelectionFeatures` or an array; 1-D input is one scalar per row."""
    if isinstance(feats, SelectionFeatures):
        return feats.vectors
    V = np.asarray(feats, dtype=np.float64)
    return V.reshape(-1, 1) if V.ndim == 1 else V


def pairwise_dist(feats: SelectionFeatures | np.ndarray, i: int, j: int) -> float:
    V = _as_rows(feats)
    return float(cdist(V[i:i + 1], V[j:j + 1])[0, 0])


class _Distances:
    """Row access to the distance matrix.

    Blocks of up to ``EXACT_LIMIT`` rows use exact ``cdist`` values. Larger
    blocks use the Gram expansion ``|a|^2 + |b|^2 - 2 a.b`` on centred
    features, which is BLAS-fast but only accurate to about ``1e-8`` of the
    squared feature norm. Up to ``dense_threshold`` rows the matrix is
    stored; beyond that rows are computed on demand.
    """

    EXACT_LIMIT = 2048

    def __init__(self, V: np.ndarray, dense_threshold: int = 8_000):
        self.V = np.ascontiguousarray(V, dtype=np.float64)
        self.n = self.V.shape[0]
        self.D = None
        if self.n <= self.EXACT_LIMIT:
            self.D = cdist(self.V, self.V)
            far = float(self.D.max()) if self.n else 0.0
        else:
            self.V = np.ascontiguousarray(self.V - self.V.mean(axis=0))
            self.sq = np.einsum("ij,ij->i", self.V, self.V)
            far = 2.0 * float(np.sqrt(self.sq.max()))
            if self.n <= dense_threshold:
                self.D = np.empty((self.n, self.n))
                for start in range(0, self.n, 1024):
                    js = np.arange(start, min(start + 1024, self.n))
                    self.D[js] = self._gram_rows(js)
                far = float(self.D.max())
        # the phantom must sit strictly away from the data, or the empty set would cover everything
        self.d_phantom = far if far > 0 else 1.0

    def _gram_rows(self, js) -> np.ndarray:
        out = self.V[js] @ self.V.T
        out *= -2.0
        out += self.sq[js, None]
        out += self.sq[None, :]
        np.maximum(out, 0.0, out=out)
        np.sqrt(out, out=out)
        out[np.arange(len(js)), js] = 0.0
        return out

    def rows(self, js) -> np.ndarray:
        js = np.atleast_1d(js)
        if self.D is not None:
            return self.D[js]
        return self._gram_rows(js)

    def row(self, j: int) -> np.ndarray:
        if self.D is not None:
            return self.D[j]
        return self._gram_rows(np.array([j]))[0]

    def gains(self, cov: np.ndarray, js) -> np.ndarray:
        """``_gains(cov, self.rows(js))`` without temporaries; bitwise identical."""
        js = np.atleast_1d(js)
        if self.D is None:
            buf = self._gram_rows(js)
        else:
            if getattr(self, "_buf", None) is None or self._buf.shape[0] < len(js):
                self._buf = np.empty((max(len(js), 256), self.n))
            buf = self._buf[:len(js)]
            np.take(self.D, js, axis=0, out=buf)
        np.subtract(cov[None, :], buf, out=buf)
        np.maximum(buf, 0.0, out=buf)
        return buf.sum(axis=1)


def _blocks(n: int, block: int = 256):
    return [np.arange(s, min(s + block, n)) for s in range(0, n, block)]


def _gains(cov: np.ndarray, rows: np.ndarray) -> np.ndarray:
    # Written as a sum of clipped coverage drops: the terms are monotone in cov,
    # so computed gains never increase as the selection grows.
    drop = np.subtract(cov[None, :], rows)
    np.maximum(drop, 0.0, out=drop)
    return drop.sum(axis=1)


def facility_objective(feats: SelectionFeatures | np.ndarray, S, d_phantom: float | None = None) -> tuple[float, float]:
    """Return ``(L(S), F(S))``. ``L`` of the empty set is ``n * d_phantom``."""
    V = _as_rows(feats)
    dist = _Distances(V)
    dp = dist.d_phantom if d_phantom is None else float(d_phantom)
    c1 = V.shape[0] * dp
    cov = _coverage(dist, S, dp)
    L = float(cov.sum())
    return L, c1 - L


def _coverage(dist: _Distances, S, d_phantom: float) -> np.ndarray:
    cov = np.full(dist.n, d_phantom)
    S = list(S)
    if S:
        cov = np.minimum(cov, dist.rows(np.asarray(S)).min(axis=0))
    return cov


def marginal_gain(feats, S, e: int, d_phantom: float | None = None) -> float:
    """``F(e | S)`` computed from the coverage vector of ``S``."""
    dist = _Distances(_as_rows(feats))
    dp = dist.d_phantom if d_phantom is None else float(d_phantom)
    return float(_gains(_coverage(dist, S, dp), dist.rows([e]))[0])


# --------------------------------------------------------------------- greedy


def stochastic_sample_size(n: int, budget: int | None, delta: float = 0.1) -> int:
    if not budget:
        return n
    return int(min(n, math.ceil(n / budget * math.log(1.0 / delta))))


def greedy_select(
    feats: SelectionFeatures | np.ndarray,
    budget: int | None = None,
    epsilon: float | None = None,
    mode: str = "lazy",
    rng: SeededRng | int | None = None,
    sample_size: int | None = None,
    dense_threshold: int = 8_000,
    lazy_chunk: int = 8,
) -> Coreset:
    """Greedy facility-location cover on one block of feature rows.

    Stops when ``L(S) <= epsilon``, when ``|S| == budget``, or when every
    point is covered exactly. Ties in gain and in nearest-medoid assignment go
    to the lowest row index. ``naive`` and ``lazy`` return identical results.
    Returned indices are global ids if ``feats.index`` is set, else row numbers.
    """
    if mode not in GREEDY_MODES:
        raise ValueError(f"unknown greedy mode {mode!r}")
    if budget is None and epsilon is None:
        raise ValueError("give a budget, an epsilon, or both")
    if not isinstance(feats, SelectionFeatures):
        feats = SelectionFeatures(_as_rows(feats), "raw_feature")
    n = feats.n
    if budget is not None and not 0 <= budget <= n:
        raise ValueError(f"budget {budget} outside [0, {n}]")
    if epsilon is not None and epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    limit = n if budget is None else budget

    dist = _Distances(feats.vectors, dense_threshold)
    cov = np.full(n, dist.d_phantom)
    selected: list[int] = []

    def done() -> bool:
        L = cov.sum()
        return len(selected) >= limit or (epsilon is not None and L <= epsilon) or L == 0.0

    if mode == "naive":
        while not done():
            gains = np.concatenate([dist.gains(cov, js) for js in _blocks(n)])
            gains[selected] = -1.0
            j = int(np.argmax(gains))
            selected.append(j)
            cov = np.minimum(cov, dist.row(j))
    elif mode == "lazy":
        gains0 = np.concatenate([dist.gains(cov, js) for js in _blocks(n)])
        heap = [(-g, j, -1) for j, g in enumerate(gains0.tolist())]
        heapq.heapify(heap)
        it = 0
        while not done() and heap:
            # Refresh stale bounds a few at a time until a freshly evaluated entry is on top.
            # Fresh gains never exceed stale bounds, so the pick equals the naive argmax.
            while heap[0][2] != it:
                stale = []
                while heap and heap[0][2] != it and len(stale) < lazy_chunk:
                    stale.append(heapq.heappop(heap)[1])
                fresh = dist.gains(cov, stale)
                for j, g in zip(stale, fresh.tolist()):
                    heapq.heappush(heap, (-g, j, it))
            j = heapq.heappop(heap)[1]
            selected.append(j)
            cov = np.minimum(cov, dist.row(j))
            it += 1
    else:
        rng = as_rng(rng)
        s = sample_size or stochastic_sample_size(n, budget)
        remaining = np.ones(n, dtype=bool)
        while not done():
            pool = np.flatnonzero(remaining)
            cand = np.sort(rng.choice(pool, size=min(s, len(pool)), replace=False))
            gains = dist.gains(cov, cand)
            if gains.max() <= 0.0:
                # the sample only held covered points; some uncovered point still has positive gain
                cand = pool
                gains = np.concatenate([dist.gains(cov, cand[js]) for js in _blocks(len(cand))])
            j = int(cand[int(np.argmax(gains))])
            selected.append(j)
            remaining[j] = False
            cov = np.minimum(cov, dist.row(j))

    residual = float(cov.sum())
    weights = assign_weights(dist, selected)
    glob = np.asarray(selected, dtype=np.int64)
    if feats.index is not None:
        glob = feats.index[glob]
    return Coreset(glob, weights, residual)


def assign_weights(dist: _Distances | np.ndarray, selected) -> np.ndarray:
    """Count, for each selected row, how many rows have it as their nearest medoid."""
    if not isinstance(dist, _Distances):
        dist = _Distances(_as_rows(dist))
    selected = list(selected)
    if not selected:
        return np.zeros(0)
    order = np.argsort(selected, kind="stable")
    sel_sorted = np.asarray(selected)[order]
    counts = np.zeros(len(selected))
    for start in range(0, dist.n, 4096):
        rows = np.arange(start, min(start + 4096, dist.n))
        if dist.D is not None:
            block = dist.D[np.ix_(rows, sel_sorted)]
        else:
            block = cdist(dist.V[rows], dist.V[sel_sorted])
        nearest = np.argmin(block, axis=1)  # first minimum = lowest selected id
        counts[order] += np.bincount(nearest, minlength=len(selected))
    return counts


def weighted_sum_error(V: np.ndarray, coreset: Coreset, rows=None) -> float:
    """``|sum_i v_i - sum_j gamma_j v_j|`` evaluated as the norm of summed medoid offsets."""
    V = _as_rows(V)
    rows = np.arange(V.shape[0]) if rows is None else np.asarray(rows)
    sub = V[rows]
    pos = {int(g): k for k, g in enumerate(rows)}
    sel_local = np.array([pos[int(j)] for j in coreset.indices])
    order = np.argsort(sel_local, kind="stable")
    sel_sorted = sel_local[order]
    nearest = sel_sorted[np.argmin(cdist(sub, sub[sel_sorted]), axis=1)]
    return float(np.linalg.norm((sub - sub[nearest]).sum(axis=0)))


# ------------------------------------------------------------- orchestration


def class_budgets(class_sizes, fraction: float) -> np.ndarray:
    """Proportional per-class budgets: largest-remainder split of ``round(fraction * n)``, at least 1 each."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    sizes = np.asarray(class_sizes, dtype=np.int64)
    total = int(math.floor(fraction * sizes.sum() + 0.5))
    nonempty = sizes > 0
    budgets = np.zeros(len(sizes), dtype=np.int64)
    if nonempty.any():
        budgets[nonempty] = largest_remainder(total, sizes[nonempty])
    budgets = np.where(nonempty, np.clip(budgets, 1, sizes), 0)
    return budgets


FeatureSource = SelectionFeatures | np.ndarray | Callable[[np.ndarray], np.ndarray]


def per_class_select(
    dataset: Dataset,
    features: FeatureSource,
    fraction: float,
    mode: str = "lazy",
    rng: SeededRng | int | None = None,
    dense_threshold: int = 8_000,
) -> Coreset:
    """Run greedy selection separately inside each class with proportional budgets.

    ``features`` is an ``(n, p)`` array (or :class:`SelectionFeatures`) over
    the whole dataset, or a callable mapping an array of example ids to their rows.
    """
    rng = as_rng(rng)
    budgets = class_budgets(dataset.class_sizes(), fraction)
    per_class, residuals, warnings = {}, {}, []
    for c, ix in enumerate(dataset.class_index):
        if len(ix) == 0:
            msg = f"class {c} is empty; skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        if budgets[c] == len(ix):
            per_class[c] = (ix.copy(), np.ones(len(ix)))
            residuals[c] = 0.0
            continue
        if callable(features):
            V = np.asarray(features(ix), dtype=np.float64)
        elif isinstance(features, SelectionFeatures):
            V = features.vectors[ix]
        else:
            V = np.asarray(features, dtype=np.float64)[ix]
        sub = SelectionFeatures(V, "class", ix)
        cs = greedy_select(sub, budget=int(budgets[c]), mode=mode, rng=rng, dense_threshold=dense_threshold)
        per_class[c] = (cs.indices, cs.weights)
        residuals[c] = cs.residual
    return _merge(per_class, residuals, warnings)


def random_select(dataset: Dataset, fraction: float, rng: SeededRng | int | None = None) -> Coreset:
    """Uniform per-class sample with the same budgets; every weight is ``class_size / budget``."""
    rng = as_rng(rng)
    budgets = class_budgets(dataset.class_sizes(), fraction)
    per_class, residuals, warnings = {}, {}, []
    for c, ix in enumerate(dataset.class_index):
        if len(ix) == 0:
            warnings.append(f"class {c} is empty; skipped")
            continue
        b = int(budgets[c])
        pick = ix.copy() if b == len(ix) else np.sort(rng.choice(ix, size=b, replace=False))
        per_class[c] = (pick, np.full(b, len(ix) / b))
        residuals[c] = float("nan")
    cs = _merge(per_class, residuals, warnings)
    cs.residual = float("nan")
    return cs


def convex_one_shot(dataset: Dataset, fraction: float, mode: str = "lazy", rng=None, dense_threshold: int = 8_000) -> Coreset:
    """One coreset for the whole run, chosen on raw feature distances."""
    return per_class_select(dataset, dataset.features, fraction, mode=mode, rng=rng, dense_threshold=dense_threshold)


# ------------------------------------------------------------------------ CSV


def write_coreset_csv(coreset: Coreset, path: str | Path, labels: np.ndarray | None = None) -> None:
    """Write ``class,index,weight`` rows, ordered by class then example id."""
    rows = []
    for c, (ix, wt) in sorted(coreset.per_class.items()):
        for i, g in sorted(zip(ix.tolist(), wt.tolist())):
            rows.append((c, i, g))
    if not coreset.per_class:
        for i, g in sorted(zip(coreset.indices.tolist(), coreset.weights.tolist())):
            rows.append((int(labels[i]) if labels is not None else 0, i, g))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class", "index", "weight"])
        for c, i, g in rows:
            writer.writerow([c, i, _fmt_weight(g)])


def _fmt_weight(g: float) -> str:
    return str(int(g)) if float(g).is_integer() else repr(float(g))


def read_coreset_csv(path: str | Path) -> Coreset:
    per_class: dict[int, tuple[list, list]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ix, wt = per_class.setdefault(int(row["class"]), ([], []))
            ix.append(int(row["index"]))
            wt.append(float(row["weight"]))
    arrays = {c: (np.array(ix, dtype=np.int64), np.array(wt)) for c, (ix, wt) in per_class.items()}
    return _merge(arrays, {c: float("nan") for c in arrays})
