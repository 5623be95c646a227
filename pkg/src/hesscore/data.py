"""Datasets: LIBSVM ingestion, synthetic class-imbalanced mixtures, scaling and splits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import SeededRng, as_rng, largest_remainder


class ParseError(ValueError):
    """Malformed LIBSVM input; the message names the offending line."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64 class ids in [0, C)
    name: str = "dataset"
    n_classes: int | None = None
    class_index: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError(f"features must be a non-empty (n, d) matrix, got {X.shape}")
        if y.shape != (X.shape[0],):
            raise ValueError("labels must have one entry per example")
        if not np.all(np.isfinite(X)):
            raise ValueError("features contain non-finite entries")
        C = int(self.n_classes) if self.n_classes is not None else int(y.max()) + 1
        C = max(C, 2)
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"labels must lie in [0, {C})")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "n_classes", C)
        object.__setattr__(self, "class_index", [np.flatnonzero(y == c) for c in range(C)])

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def class_sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.class_index])

    def subset(self, idx: Sequence[int], name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], name or self.name, self.n_classes)


# ---------------------------------------------------------------- LIBSVM I/O


def _parse_line(line: str, lineno: int):
    tokens = line.split(" ")
    tokens = [t for t in tokens if t != ""]
    if not tokens:
        raise ParseError(f"line {lineno}: empty line")
    try:
        label = float(tokens[0])
    except ValueError:
        raise ParseError(f"line {lineno}: invalid label {tokens[0]!r}") from None
    idx, vals = [], []
    prev = 0
    for tok in tokens[1:]:
        key, sep, val = tok.partition(":")
        if not sep:
            raise ParseError(f"line {lineno}: expected idx:val, got {tok!r}")
        try:
            j = int(key)
            v = float(val)
        except ValueError:
            raise ParseError(f"line {lineno}: bad feature token {tok!r}") from None
        if j < 1:
            raise ParseError(f"line {lineno}: feature indices are 1-based, got {j}")
        if j <= prev:
            raise ParseError(f"line {lineno}: feature indices must be ascending ({prev} then {j})")
        prev = j
        idx.append(j - 1)
        vals.append(v)
    return label, idx, vals


def _label_values(raw: np.ndarray) -> list[float]:
    seen = set(raw.tolist())
    # binary conventions keep their positive class at id 1 even if only one class is present
    for binary in ([-1.0, 1.0], [0.0, 1.0]):
        if seen <= set(binary):
            return binary
    return sorted(seen)


def load_libsvm(
    path: str | Path,
    dim_hint: int | None = None,
    label_values: Sequence[float] | None = None,
    name: str | None = None,
) -> Dataset:
    """Read a LIBSVM text file into a dense :class:`Dataset`.

    Original labels are remapped to ``0..C-1`` by sorted value. Pass
    ``label_values`` to pin that mapping (e.g. when a test file lacks a class
    that the training file has).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    rows = []
    for lineno, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        rows.append(_parse_line(line, lineno))
    if not rows:
        raise ValueError(f"{path}: no examples found")

    d = max((r[1][-1] + 1 for r in rows if r[1]), default=1)
    if dim_hint is not None:
        if dim_hint < d:
            raise ParseError(f"{path}: feature index {d} exceeds dim_hint {dim_hint}")
        d = dim_hint
    X = np.zeros((len(rows), d))
    raw_labels = np.empty(len(rows))
    for i, (label, idx, vals) in enumerate(rows):
        raw_labels[i] = label
        X[i, idx] = vals

    values = _label_values(raw_labels) if label_values is None else sorted(label_values)
    lookup = {v: k for k, v in enumerate(values)}
    try:
        y = np.array([lookup[v] for v in raw_labels], dtype=np.int64)
    except KeyError as exc:
        raise ParseError(f"{path}: label {exc.args[0]} not in {values}") from None
    return Dataset(X, y, name or path.stem, n_classes=max(len(values), 2))


def save_libsvm(ds: Dataset, path: str | Path, label_values: Sequence[float] | None = None) -> None:
    """Write ``ds`` in LIBSVM format; zero features are omitted.

    Floats use ``repr`` so a reload reproduces them exactly.
    """
    lines = []
    for x, c in zip(ds.features, ds.labels):
        label = c if label_values is None else label_values[c]
        parts = [repr(label) if isinstance(label, float) else str(label)]
        parts += [f"{j + 1}:{float(v)!r}" for j, v in enumerate(x) if v != 0.0]
        lines.append(" ".join(parts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ----------------------------------------------------------- synthetic data


@dataclass
class SyntheticSpec:
    """Class-conditional Gaussian mixture.

    ``cluster_means`` has shape ``(C, m, d)``: ``m`` sub-cluster centres per
    class, each drawn with equal probability. ``cluster_scales`` is ``(C, d)``
    per-class, per-feature standard deviations.
    """

    n: int
    d: int
    class_fractions: Sequence[float]
    cluster_means: np.ndarray
    cluster_scales: np.ndarray
    seed: int = 0
    name: str = "synthetic"

    def __post_init__(self):
        fr = np.asarray(self.class_fractions, dtype=np.float64)
        if fr.ndim != 1 or len(fr) < 2:
            raise ValueError("need at least two class fractions")
        if np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise ValueError("class fractions must be positive and sum to 1")
        means = np.asarray(self.cluster_means, dtype=np.float64)
        if means.ndim == 2:
            means = means[:, None, :]
        scales = np.asarray(self.cluster_scales, dtype=np.float64)
        if scales.ndim == 1:
            scales = np.broadcast_to(scales[:, None], (len(fr), self.d)).copy()
        if means.shape[0] != len(fr) or means.shape[2] != self.d:
            raise ValueError(f"cluster_means shape {means.shape} does not match C={len(fr)}, d={self.d}")
        if scales.shape != (len(fr), self.d) or np.any(scales <= 0):
            raise ValueError("cluster_scales must be positive with shape (C, d)")
        self.class_fractions = fr
        self.cluster_means = means
        self.cluster_scales = scales


def imbalanced_spec(
    n: int = 5000,
    d: int = 22,
    class_fractions: Sequence[float] = (0.9, 0.1),
    separation: float = 0.5,
    modes: int = 8,
    scale_spread: float = 10.0,
    mode_spread: float = 1.0,
    noise: float = 0.5,
    seed: int = 0,
) -> SyntheticSpec:
    """A surrogate for small dense benchmark data such as Ijcnn1.

    Each class is a mixture of ``modes`` Gaussian blobs whose centres scatter
    by ``mode_spread`` around the class centre; ``noise`` sets the blob width
    relative to that. Feature scales span
    ``scale_spread`` (log-uniformly), so curvature differs across coordinates.
    """
    rng = SeededRng(seed)
    C = len(class_fractions)
    feature_scale = np.exp(rng.uniform(0.0, math.log(scale_spread), size=d)) / math.sqrt(scale_spread)
    centres = rng.normal(size=(C, d)) * separation / math.sqrt(d)
    means = centres[:, None, :] + rng.normal(size=(C, modes, d)) * mode_spread / math.sqrt(d)
    means = means * feature_scale
    scales = noise * np.exp(rng.uniform(math.log(0.5), math.log(1.5), size=(C, d))) * feature_scale
    return SyntheticSpec(n, d, tuple(class_fractions), means, scales, seed=seed)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    C = len(spec.class_fractions)
    if spec.n < C:
        raise ValueError(f"n={spec.n} is smaller than the number of classes {C}")
    counts = largest_remainder(spec.n, spec.class_fractions)
    rng = SeededRng(spec.seed).spawn(1)[0]
    X = np.empty((spec.n, spec.d))
    y = np.empty(spec.n, dtype=np.int64)
    start = 0
    for c, m in enumerate(counts):
        modes = spec.cluster_means[c]
        which = rng.integers(0, modes.shape[0], size=m)
        X[start:start + m] = modes[which] + rng.normal(size=(m, spec.d)) * spec.cluster_scales[c]
        y[start:start + m] = c
        start += m
    # interleave classes so index order carries no label information
    perm = rng.permutation(spec.n)
    return Dataset(X[perm], y[perm], spec.name, n_classes=C)


# ------------------------------------------------------------ transformations


def normalize_01(ds: Dataset, divisor: float) -> Dataset:
    if not divisor > 0:
        raise ValueError(f"divisor must be positive, got {divisor}")
    return Dataset(ds.features / divisor, ds.labels, ds.name, ds.n_classes)


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Z-score every dataset with the training split's statistics."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd[sd == 0] = 1.0
    return tuple(Dataset((ds.features - mu) / sd, ds.labels, ds.name, ds.n_classes) for ds in (train, *others))


def train_test_split(ds: Dataset, test_fraction: float, rng: SeededRng | int | None = None) -> tuple[Dataset, Dataset]:
    """Stratified split; each class keeps its proportion in both halves."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = as_rng(rng)
    train_idx, test_idx = [], []
    for ix in ds.class_index:
        if len(ix) == 0:
            continue
        perm = rng.permutation(ix)
        k = int(math.floor(len(ix) * test_fraction + 0.5))
        k = min(max(k, 1 if len(ix) > 1 else 0), len(ix) - 1)
        test_idx.append(perm[:k])
        train_idx.append(perm[k:])
    tr = np.sort(np.concatenate(train_idx))
    te = np.sort(np.concatenate(test_idx))
    return ds.subset(tr, f"{ds.name}-train"), ds.subset(te, f"{ds.name}-test")
