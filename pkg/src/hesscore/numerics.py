"""Dense numeric helpers shared by the rest of the package.

Randomness comes from numpy's Philox counter-based bit generator, which
produces the same stream for a given seed on every platform numpy supports.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when array shapes do not line up."""


class SeededRng:
    """Single-owner random source backed by ``numpy.random.Philox``.

    Child streams obtained with :meth:`spawn` are independent of the parent
    and of each other, and are themselves reproducible from the root seed.
    """

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def spawn(self, n: int = 1) -> list["SeededRng"]:
        children = []
        for child_seq in self._seq.spawn(n):
            child = SeededRng.__new__(SeededRng)
            child.seed = self.seed
            child._seq = child_seq
            child.gen = np.random.Generator(np.random.Philox(child_seq))
            children.append(child)
        return children

    # thin pass-throughs so callers don't reach into .gen for the common cases
    def normal(self, *args, **kwargs):
        return self.gen.normal(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.gen.uniform(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.gen.integers(*args, **kwargs)

    def choice(self, *args, **kwargs):
        return self.gen.choice(*args, **kwargs)

    def permutation(self, x):
        return self.gen.permutation(x)


def as_rng(rng: SeededRng | int | None) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(0 if rng is None else rng)


def rademacher(rng: SeededRng, d: int, size: int | None = None) -> np.ndarray:
    """Draw i.i.d. uniform sign vectors with entries in {-1, +1}.

    With ``size`` given, returns a ``(size, d)`` block of independent vectors.
    """
    if d < 1:
        raise DimensionError(f"rademacher dimension must be >= 1, got {d}")
    shape = (d,) if size is None else (size, d)
    bits = rng.gen.integers(0, 2, size=shape, dtype=np.int8)
    return (2.0 * bits - 1.0).astype(np.float64)


def deterministic_sum(xs: Iterable[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Left-to-right sum of equal-length vectors.

    The accumulation order is fixed, so repeated calls on the same input
    sequence are bit-identical. ``dim`` is needed only when ``xs`` is empty.
    """
    total = None
    for x in xs:
        x = np.asarray(x, dtype=np.float64)
        if total is None:
            total = x.copy()
            continue
        if x.shape != total.shape:
            raise DimensionError(f"cannot sum shapes {total.shape} and {x.shape}")
        total += x
    if total is None:
        if dim is None:
            raise DimensionError("empty sum needs an explicit dim")
        return np.zeros(dim)
    return total


def check_finite(x: np.ndarray, name: str = "array") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite entries")
    return x


def symmetric(m: Sequence[Sequence[float]] | np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Build a symmetric matrix, rejecting inputs that are not symmetric within ``tol``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > tol:
        raise ValueError("matrix is not symmetric")
    return m


def sigmoid(z: np.ndarray) -> np.ndarray:
    # scipy's expit is stable for large |z|
    from scipy.special import expit

    return expit(z)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def largest_remainder(total: int, fractions: Sequence[float]) -> np.ndarray:
    """Integer counts proportional to ``fractions`` that sum exactly to ``total``.

    Floors each share, then hands the leftover units to the largest fractional
    remainders (lowest index first on ties).
    """
    fr = np.asarray(fractions, dtype=np.float64)
    raw = total * fr / fr.sum()
    counts = np.floor(raw).astype(np.int64)
    rem = raw - counts
    short = int(total - counts.sum())
    order = sorted(range(len(fr)), key=lambda i: (-rem[i], i))
    for i in order[:short]:
        counts[i] += 1
    return counts
