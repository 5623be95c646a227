"""Per-example differentiable losses behind one interface.

Every model is bound to a feature matrix and labels and evaluates losses,
gradients and curvature for index subsets of that data. Parameters are a
flat float64 vector. The full-data objective is the mean of per-example
losses, each of which carries its own share of the regularizer.
"""

from __future__ import annotations

import math

import numpy as np

from .data import Dataset
from .numerics import DimensionError, sigmoid, softplus

_SQRT_EPS = math.sqrt(np.finfo(np.float64).eps)


def _as_index(idx, n: int) -> np.ndarray:
    if idx is None:
        return np.arange(n)
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"example index out of range [0, {n})")
    return idx


def _weights(weights, m: int) -> np.ndarray:
    if weights is None:
        return np.ones(m)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (m,):
        raise DimensionError(f"expected {m} weights, got shape {weights.shape}")
    return weights


class Model:
    """Common surface. Subclasses fill in the vectorized per-example pieces.

    Required: ``dim``, ``n``, ``losses``, ``grads``, ``predict_proba``.
    Optional: ``hessians`` / ``hess_diags`` (analytic curvature),
    ``proxy_grads`` / ``proxy_hvp`` (low-dimensional gradient proxy).
    """

    dim: int
    n: int
    convex: bool = False
    n_classes: int = 2

    # -- per-example, vectorized over an index array
    def losses(self, w, idx=None) -> np.ndarray:
        raise NotImplementedError

    def grads(self, w, idx=None) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, w, X=None) -> np.ndarray:
        raise NotImplementedError

    # -- scalar helpers
    def loss_i(self, w, i: int) -> float:
        return float(self.losses(w, [i])[0])

    def grad_i(self, w, i: int) -> np.ndarray:
        return self.grads(w, [i])[0]

    def hess_i(self, w, i: int) -> np.ndarray:
        return self.hessians(w, [i])[0]

    def hess_diag_i(self, w, i: int) -> np.ndarray:
        return self.hess_diags(w, [i])[0]

    def proxy_grad_i(self, w, i: int) -> np.ndarray:
        return self.proxy_grads(w, [i])[0]

    # -- weighted batch aggregates
    def loss(self, w, idx=None, weights=None) -> float:
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        return float(wt @ self.losses(w, idx) / wt.sum())

    def grad(self, w, idx=None, weights=None) -> np.ndarray:
        """Weighted mean gradient ``sum(g_i * w_i) / sum(w_i)``."""
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        return wt @ self.grads(w, idx) / wt.sum()

    def hessian(self, w, idx=None, weights=None) -> np.ndarray:
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        return np.tensordot(wt, self.hessians(w, idx), axes=1) / wt.sum()

    def hessians(self, w, idx=None) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no analytic Hessian")

    def hess_diags(self, w, idx=None) -> np.ndarray:
        return np.diagonal(self.hessians(w, idx), axis1=1, axis2=2).copy()

    def hvp(self, w, z, batch=None, weights=None) -> np.ndarray:
        """Batch-averaged Hessian-vector product by central differences of the gradient."""
        w = np.asarray(w, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if z.shape != w.shape:
            raise DimensionError(f"z has shape {z.shape}, parameters have {w.shape}")
        batch = _as_index(batch, self.n)
        if len(batch) == 0:
            raise ValueError("empty batch")
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return np.zeros_like(w)
        step = _SQRT_EPS * (1.0 + np.linalg.norm(w)) / (1.0 + nz)
        gp = self.grad(w + step * z, batch, weights)
        gm = self.grad(w - step * z, batch, weights)
        return (gp - gm) / (2.0 * step)

    # -- proxy space; defaults to the full parameter gradient
    @property
    def proxy_dim(self) -> int:
        return self.dim

    def proxy_grads(self, w, idx=None) -> np.ndarray:
        return self.grads(w, idx)

    def proxy_hvp(self, w, z, batch=None) -> np.ndarray:
        return self.hvp(w, z, batch)

    def predict(self, w, X=None) -> np.ndarray:
        return np.argmax(self.predict_proba(w, X), axis=1)

    def accuracy(self, w, ds: Dataset) -> float:
        return float(np.mean(self.predict(w, ds.features) == ds.labels))

    def init_params(self, rng=None) -> np.ndarray:
        return np.zeros(self.dim)


class QuadraticModel(Model):
    """``l_i(w) = 0.5 (w - c_i)^T A (w - c_i)``: constant Hessian ``A``, used by tests and examples."""

    convex = True

    def __init__(self, A, centers=None, n: int = 1):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.dim = self.A.shape[0]
        self.centers = np.zeros((n, self.dim)) if centers is None else np.atleast_2d(np.asarray(centers, dtype=np.float64))
        self.n = self.centers.shape[0]

    def losses(self, w, idx=None):
        idx = _as_index(idx, self.n)
        r = np.asarray(w) - self.centers[idx]
        return 0.5 * np.einsum("ij,jk,ik->i", r, self.A, r)

    def grads(self, w, idx=None):
        idx = _as_index(idx, self.n)
        return (np.asarray(w) - self.centers[idx]) @ self.A.T

    def hessians(self, w, idx=None):
        idx = _as_index(idx, self.n)
        return np.broadcast_to(self.A, (len(idx), self.dim, self.dim)).copy()

    def hvp(self, w, z, batch=None, weights=None):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise DimensionError(f"z has shape {z.shape}, expected ({self.dim},)")
        _as_index(batch, self.n)
        return self.A @ z

    def predict_proba(self, w, X=None):
        raise NotImplementedError("quadratic model has no classifier head")


class LogisticModel(Model):
    """L2-regularized binary logistic regression, bias appended as the last coordinate.

    ``l_i(w) = softplus(-s_i (x_i . w[:d] + w[d])) + mu/2 * |w[:d]|^2`` with
    ``s_i = 2 y_i - 1``. The bias is not regularized.
    """

    convex = True

    def __init__(self, ds: Dataset, mu: float = 0.0):
        if ds.n_classes != 2:
            raise ValueError("logistic regression needs a binary dataset")
        if mu < 0:
            raise ValueError("mu must be non-negative")
        self.ds = ds
        self.X = ds.features
        self.y = ds.labels.astype(np.float64)
        self.mu = float(mu)
        self.n, self.d = self.X.shape
        self.dim = self.d + 1
        self._reg_mask = np.r_[np.ones(self.d), 0.0]

    def _check(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError(f"parameters have shape {w.shape}, expected ({self.dim},)")
        return w

    def _margin(self, w, X):
        return X @ w[:-1] + w[-1]

    def probs(self, w, idx=None) -> np.ndarray:
        """Predicted probability of class 1 for each indexed example."""
        w = self._check(w)
        idx = _as_index(idx, self.n)
        return sigmoid(self._margin(w, self.X[idx]))

    def losses(self, w, idx=None):
        w = self._check(w)
        idx = _as_index(idx, self.n)
        s = 2.0 * self.y[idx] - 1.0
        reg = 0.5 * self.mu * float(w[:-1] @ w[:-1])
        return softplus(-s * self._margin(w, self.X[idx])) + reg

    def grads(self, w, idx=None):
        w = self._check(w)
        idx = _as_index(idx, self.n)
        r = sigmoid(self._margin(w, self.X[idx])) - self.y[idx]
        G = np.empty((len(idx), self.dim))
        G[:, :-1] = r[:, None] * self.X[idx]
        G[:, -1] = r
        G[:, :-1] += self.mu * w[:-1]
        return G

    def grad(self, w, idx=None, weights=None):
        w = self._check(w)
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        r = wt * (sigmoid(self._margin(w, self.X[idx])) - self.y[idx])
        total = wt.sum()
        g = np.empty(self.dim)
        g[:-1] = r @ self.X[idx] / total + self.mu * w[:-1]
        g[-1] = r.sum() / total
        return g

    def _curv(self, w, idx):
        p = sigmoid(self._margin(w, self.X[idx]))
        return p * (1.0 - p)

    def hessians(self, w, idx=None):
        """Per-example ``s(1-s) [x x^T, x; x^T, 1] + mu * diag(1,...,1,0)``."""
        w = self._check(w)
        idx = _as_index(idx, self.n)
        c = self._curv(w, idx)
        V = np.hstack([self.X[idx], np.ones((len(idx), 1))])
        H = c[:, None, None] * V[:, :, None] * V[:, None, :]
        H += self.mu * np.diag(self._reg_mask)
        return H

    def hessian(self, w, idx=None, weights=None):
        w = self._check(w)
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        c = wt * self._curv(w, idx)
        V = np.hstack([self.X[idx], np.ones((len(idx), 1))])
        return (V.T * c) @ V / wt.sum() + self.mu * np.diag(self._reg_mask)

    def hess_diags(self, w, idx=None):
        w = self._check(w)
        idx = _as_index(idx, self.n)
        c = self._curv(w, idx)
        D = np.empty((len(idx), self.dim))
        D[:, :-1] = c[:, None] * self.X[idx] ** 2 + self.mu
        D[:, -1] = c
        return D

    def hvp(self, w, z, batch=None, weights=None):
        w = self._check(w)
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise DimensionError(f"z has shape {z.shape}, expected ({self.dim},)")
        batch = _as_index(batch, self.n)
        if len(batch) == 0:
            raise ValueError("empty batch")
        wt = _weights(weights, len(batch))
        c = wt * self._curv(w, batch)
        X = self.X[batch]
        vz = X @ z[:-1] + z[-1]
        out = np.empty(self.dim)
        cv = c * vz
        out[:-1] = cv @ X / wt.sum() + self.mu * z[:-1]
        out[-1] = cv.sum() / wt.sum()
        return out

    def predict_proba(self, w, X=None):
        w = self._check(w)
        X = self.X if X is None else np.asarray(X, dtype=np.float64)
        p = sigmoid(self._margin(w, X))
        return np.column_stack([1.0 - p, p])

    def smoothness_bounds(self) -> tuple[float, float]:
        """Conservative (strong convexity, smoothness) constants for the mean loss.

        Strong convexity is taken as ``mu``; smoothness as the largest
        per-example Hessian trace bound ``|x|^2 / 4 + 1/4 + mu``.
        """
        sq = np.einsum("ij,ij->i", self.X, self.X)
        return self.mu, float(sq.max() / 4.0 + 0.25 + self.mu)


class RidgeModel(Model):
    """``l_i(w) = 0.5 (x_i . w - t_i)^2 + lam/2 |w|^2``; targets default to ``2 y - 1``."""

    convex = True

    def __init__(self, ds: Dataset, lam: float = 0.0, targets=None):
        if lam < 0:
            raise ValueError("lam must be non-negative")
        self.ds = ds
        self.X = ds.features
        self.t = (2.0 * ds.labels - 1.0) if targets is None else np.asarray(targets, dtype=np.float64)
        if self.t.shape != (ds.n,):
            raise DimensionError("need one target per example")
        self.lam = float(lam)
        self.n, self.dim = self.X.shape

    def residuals(self, w, idx=None):
        idx = _as_index(idx, self.n)
        return self.X[idx] @ np.asarray(w, dtype=np.float64) - self.t[idx]

    def losses(self, w, idx=None):
        w = np.asarray(w, dtype=np.float64)
        return 0.5 * self.residuals(w, idx) ** 2 + 0.5 * self.lam * float(w @ w)

    def grads(self, w, idx=None):
        w = np.asarray(w, dtype=np.float64)
        idx = _as_index(idx, self.n)
        return self.residuals(w, idx)[:, None] * self.X[idx] + self.lam * w

    def grad(self, w, idx=None, weights=None):
        w = np.asarray(w, dtype=np.float64)
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        return (wt * self.residuals(w, idx)) @ self.X[idx] / wt.sum() + self.lam * w

    def hessians(self, w, idx=None):
        idx = _as_index(idx, self.n)
        X = self.X[idx]
        return X[:, :, None] * X[:, None, :] + self.lam * np.eye(self.dim)

    def hessian(self, w, idx=None, weights=None):
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        X = self.X[idx]
        return (X.T * wt) @ X / wt.sum() + self.lam * np.eye(self.dim)

    def hess_diags(self, w, idx=None):
        idx = _as_index(idx, self.n)
        return self.X[idx] ** 2 + self.lam

    def hvp(self, w, z, batch=None, weights=None):
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise DimensionError(f"z has shape {z.shape}, expected ({self.dim},)")
        batch = _as_index(batch, self.n)
        if len(batch) == 0:
            raise ValueError("empty batch")
        wt = _weights(weights, len(batch))
        X = self.X[batch]
        return (wt * (X @ z)) @ X / wt.sum() + self.lam * z

    def predict_proba(self, w, X=None):
        X = self.X if X is None else np.asarray(X, dtype=np.float64)
        pos = (X @ np.asarray(w) > 0).astype(np.float64)
        return np.column_stack([1.0 - pos, pos])


class ToyMlp(Model):
    """One sigmoid hidden layer, softmax cross-entropy head, L2 weight decay on weight matrices.

    Parameter layout: ``W1 (h, d0) | b1 (h) | W2 (C, h) | b2 (C)``.
    The gradient proxy for example ``i`` is ``softmax(logits_i) - onehot(y_i)``,
    the exact gradient of the loss with respect to the logits.
    """

    def __init__(self, ds: Dataset, hidden: int = 32, weight_decay: float = 1e-4):
        if ds.d > 64 or hidden > 100 or ds.n_classes > 10:
            raise ValueError("ToyMlp is limited to input <= 64, hidden <= 100, classes <= 10")
        self.ds = ds
        self.X = ds.features
        self.y = ds.labels
        self.n, self.d0 = self.X.shape
        self.h = int(hidden)
        self.n_classes = self.C = ds.n_classes
        self.wd = float(weight_decay)
        self._sizes = [self.h * self.d0, self.h, self.C * self.h, self.C]
        self._offsets = np.cumsum([0] + self._sizes)
        self.dim = int(self._offsets[-1])
        self._decay_mask = np.zeros(self.dim)
        self._decay_mask[self._offsets[0]:self._offsets[1]] = 1.0
        self._decay_mask[self._offsets[2]:self._offsets[3]] = 1.0

    def unpack(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.dim,):
            raise DimensionError(f"parameters have shape {w.shape}, expected ({self.dim},)")
        o = self._offsets
        W1 = w[o[0]:o[1]].reshape(self.h, self.d0)
        b1 = w[o[1]:o[2]]
        W2 = w[o[2]:o[3]].reshape(self.C, self.h)
        b2 = w[o[3]:o[4]]
        return W1, b1, W2, b2

    def init_params(self, rng=None):
        from .numerics import as_rng

        rng = as_rng(rng)
        w = np.zeros(self.dim)
        o = self._offsets
        w[o[0]:o[1]] = rng.normal(size=self._sizes[0]) / math.sqrt(self.d0)
        w[o[2]:o[3]] = rng.normal(size=self._sizes[2]) / math.sqrt(self.h)
        return w

    def _forward(self, w, X):
        W1, b1, W2, b2 = self.unpack(w)
        a = sigmoid(X @ W1.T + b1)
        logits = a @ W2.T + b2
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return a, logits, p

    def logits(self, w, idx=None) -> np.ndarray:
        idx = _as_index(idx, self.n)
        W1, b1, W2, b2 = self.unpack(w)
        a = sigmoid(self.X[idx] @ W1.T + b1)
        return a @ W2.T + b2

    def _decay(self, w):
        return 0.5 * self.wd * float((self._decay_mask * w) @ w)

    def losses(self, w, idx=None):
        idx = _as_index(idx, self.n)
        _, logits, _ = self._forward(w, self.X[idx])
        lse = np.log(np.exp(logits).sum(axis=1))
        return lse - logits[np.arange(len(idx)), self.y[idx]] + self._decay(w)

    def _backward(self, w, idx, coef):
        """Gradient of sum_i coef_i * CE_i; ``coef`` may be a vector of per-example weights."""
        X = self.X[idx]
        a, _, p = self._forward(w, X)
        _, _, W2, _ = self.unpack(w)
        delta2 = p.copy()
        delta2[np.arange(len(idx)), self.y[idx]] -= 1.0
        delta2 *= coef[:, None]
        delta1 = (delta2 @ W2) * a * (1.0 - a)
        return np.concatenate([(delta1.T @ X).ravel(), delta1.sum(0), (delta2.T @ a).ravel(), delta2.sum(0)])

    def grad(self, w, idx=None, weights=None):
        w = np.asarray(w, dtype=np.float64)
        idx = _as_index(idx, self.n)
        wt = _weights(weights, len(idx))
        return self._backward(w, idx, wt / wt.sum()) + self.wd * self._decay_mask * w

    def grads(self, w, idx=None):
        w = np.asarray(w, dtype=np.float64)
        idx = _as_index(idx, self.n)
        X = self.X[idx]
        a, _, p = self._forward(w, X)
        _, _, W2, _ = self.unpack(w)
        delta2 = p.copy()
        delta2[np.arange(len(idx)), self.y[idx]] -= 1.0
        delta1 = (delta2 @ W2) * a * (1.0 - a)
        m = len(idx)
        G = np.concatenate(
            [
                (delta1[:, :, None] * X[:, None, :]).reshape(m, -1),
                delta1,
                (delta2[:, :, None] * a[:, None, :]).reshape(m, -1),
                delta2,
            ],
            axis=1,
        )
        return G + self.wd * self._decay_mask * w

    @property
    def proxy_dim(self) -> int:
        return self.C

    def proxy_grads(self, w, idx=None):
        idx = _as_index(idx, self.n)
        _, _, p = self._forward(w, self.X[idx])
        p[np.arange(len(idx)), self.y[idx]] -= 1.0
        return p

    def proxy_hvp(self, w, z, batch=None):
        """Batch mean of ``(diag(p) - p p^T) z``: the cross-entropy Hessian in logit space."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.C,):
            raise DimensionError(f"z has shape {z.shape}, expected ({self.C},)")
        batch = _as_index(batch, self.n)
        if len(batch) == 0:
            raise ValueError("empty batch")
        _, _, p = self._forward(w, self.X[batch])
        Hz = p * z - p * (p @ z)[:, None]
        return Hz.mean(axis=0)

    def predict_proba(self, w, X=None):
        X = self.X if X is None else np.asarray(X, dtype=np.float64)
        return self._forward(w, X)[2]


def build_model(kind: str, ds: Dataset, **params) -> Model:
    kinds = {"logistic": LogisticModel, "ridge": RidgeModel, "mlp": ToyMlp}
    try:
        cls = kinds[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(kinds)}") from None
    return cls(ds, **params)
