"""Group-conditional density estimators.

Two families are supported: full-covariance Gaussian mixtures fitted by EM
(continuous data) and an exact autoregressive count model with Laplace
smoothing (categorical data). Both expose vectorised ``log_prob`` and
``sample``; the mixture additionally has a torch path so that training losses
can differentiate through it with respect to the input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.special import logsumexp

CHOL_FLOOR = 1e-6
LOG_2PI = math.log(2 * math.pi)


class DensityError(ValueError):
    pass


@dataclass
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    chols: np.ndarray  # (K, d, d) lower-triangular Cholesky factors of the covariances
    diagonal: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.chols = np.asarray(self.chols, dtype=np.float64).reshape(len(self.weights), self.dim, self.dim)
        if abs(self.weights.sum() - 1.0) > 1e-12 or np.any(self.weights <= 0):
            raise DensityError("mixture weights must be positive and sum to 1")
        if np.any(np.diagonal(self.chols, axis1=1, axis2=2) <= 0):
            raise DensityError("covariance factors must have a positive diagonal")
        self._torch_cache = None

    @property
    def K(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        return self.chols @ np.swapaxes(self.chols, 1, 2)

    @classmethod
    def from_covariances(cls, weights, means, covs, diagonal=False) -> "GaussianMixture":
        covs = np.asarray(covs, dtype=np.float64)
        return cls(weights, means, np.linalg.cholesky(covs), diagonal)

    def component_log_probs(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DensityError(f"expected dimension {self.dim}, got {x.shape[1]}")
        out = np.empty((x.shape[0], self.K))
        for k in range(self.K):
            L = self.chols[k]
            sol = _solve_lower(L, (x - self.means[k]).T)
            maha = np.sum(sol**2, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, k] = -0.5 * (self.dim * LOG_2PI + logdet + maha)
        return out

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        return logsumexp(self.component_log_probs(x) + np.log(self.weights), axis=1)

    def log_prob_torch(self, x: torch.Tensor) -> torch.Tensor:
        if self._torch_cache is None:
            inv = np.linalg.inv(self.chols)
            logdet = 2.0 * np.sum(np.log(np.diagonal(self.chols, axis1=1, axis2=2)), axis=1)
            const = np.log(self.weights) - 0.5 * (self.dim * LOG_2PI + logdet)
            self._torch_cache = tuple(torch.tensor(a) for a in (self.means, inv, const))
        means, inv, const = self._torch_cache
        diff = x[:, None, :] - means[None]  # (n, K, d)
        sol = torch.einsum("kij,nkj->nki", inv, diff)
        return torch.logsumexp(const - 0.5 * (sol**2).sum(-1), dim=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.K, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], eps)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "chols": self.chols.tolist(),
            "diagonal": self.diagonal,
        }

    @classmethod
    def from_json(cls, obj) -> "GaussianMixture":
        return cls(np.array(obj["weights"]), np.array(obj["means"]), np.array(obj["chols"]), obj["diagonal"])


def _solve_lower(L, b):
    from scipy.linalg import solve_triangular

    return solve_triangular(L, b, lower=True)


@dataclass
class AutoregressiveCategorical:
    """p(x) = prod_i p(x_i | x_<i) with smoothed count tables.

    Tables are stored sparsely: one count row per observed prefix. An unseen
    prefix has zero counts, so its conditional is uniform, which is exactly
    what the smoothing formula gives.
    """

    cardinalities: tuple
    alpha: float
    order: tuple
    tables: list = field(default_factory=list)  # tables[i]: {prefix tuple: counts array}

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        self.order = tuple(int(o) for o in self.order)
        if self.alpha <= 0:
            raise DensityError("smoothing alpha must be positive")

    @property
    def dim(self) -> int:
        return len(self.cardinalities)

    def conditional(self, i: int, prefix: tuple) -> np.ndarray:
        """Probability row for the ``i``-th column in ``order`` given earlier values."""
        d = self.cardinalities[self.order[i]]
        counts = self.tables[i].get(tuple(prefix))
        if counts is None:
            return np.full(d, 1.0 / d)
        return (counts + self.alpha) / (counts.sum() + self.alpha * d)

    def _check(self, x):
        x = np.atleast_2d(np.asarray(x))
        if x.shape[1] != self.dim:
            raise DensityError(f"expected {self.dim} columns, got {x.shape[1]}")
        if not np.issubdtype(x.dtype, np.integer):
            if np.any(x != np.round(x)):
                raise DensityError("categorical values must be integers")
            x = x.astype(np.int64)
        card = np.array(self.cardinalities)
        if np.any(x < 0) or np.any(x >= card):
            bad = np.argwhere((x < 0) | (x >= card))[0]
            raise DensityError(f"value {x[tuple(bad)]} out of range for column {bad[1]}")
        return x

    def log_prob(self, x) -> np.ndarray:
        x = self._check(x)[:, list(self.order)]
        out = np.zeros(x.shape[0])
        cache: dict = {}
        for r, row in enumerate(map(tuple, x)):
            lp = cache.get(row)
            if lp is None:
                lp = 0.0
                for i in range(self.dim):
                    lp += math.log(self.conditional(i, row[:i])[row[i]])
                cache[row] = lp
            out[r] = lp
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ordered = np.zeros((n, self.dim), dtype=np.int64)
        for i in range(self.dim):
            d = self.cardinalities[self.order[i]]
            u = rng.random(n)
            prefixes = [tuple(r) for r in ordered[:, :i]]
            groups: dict = {}
            for r, p in enumerate(prefixes):
                groups.setdefault(p, []).append(r)
            for p, rows in groups.items():
                cdf = np.cumsum(self.conditional(i, p))
                ordered[rows, i] = np.minimum(np.searchsorted(cdf, u[rows], side="right"), d - 1)
        out = np.empty_like(ordered)
        out[:, list(self.order)] = ordered
        return out

    def to_json(self) -> dict:
        return {
            "cardinalities": list(self.cardinalities),
            "alpha": self.alpha,
            "order": list(self.order),
            "tables": [[[list(k), v.tolist()] for k, v in sorted(t.items())] for t in self.tables],
        }

    @classmethod
    def from_json(cls, obj) -> "AutoregressiveCategorical":
        tables = [{tuple(k): np.asarray(v, dtype=np.float64) for k, v in t} for t in obj["tables"]]
        return cls(tuple(obj["cardinalities"]), obj["alpha"], tuple(obj["order"]), tables)


@dataclass
class DensityModel:
    """A fitted group density plus bookkeeping about the fit."""

    model: GaussianMixture | AutoregressiveCategorical
    group: int | None = None
    fit_loglik: float | None = None
    n_samples: int = 0
    notes: list = field(default_factory=list)
    loglik_trace: list = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "gmm" if isinstance(self.model, GaussianMixture) else "categorical"

    @property
    def dim(self) -> int:
        return self.model.dim

    def log_prob(self, x) -> np.ndarray:
        return self.model.log_prob(x)

    def log_prob_torch(self, x: torch.Tensor) -> torch.Tensor:
        if self.kind != "gmm":
            raise DensityError("only mixture densities are differentiable")
        return self.model.log_prob_torch(x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return sample(self, n, rng)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "group": self.group,
            "fit_loglik": self.fit_loglik,
            "n_samples": self.n_samples,
            "notes": list(self.notes),
            "params": self.model.to_json(),
        }

    @classmethod
    def from_json(cls, obj) -> "DensityModel":
        m = GaussianMixture.from_json(obj["params"]) if obj["kind"] == "gmm" else AutoregressiveCategorical.from_json(obj["params"])
        return cls(m, obj["group"], obj["fit_loglik"], obj["n_samples"], list(obj["notes"]))


# --------------------------------------------------------------------------- fitting


def _kmeanspp(data, K, rng):
    n = data.shape[0]
    centers = [data[rng.integers(n)]]
    d2 = np.sum((data - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(data[idx])
        d2 = np.minimum(d2, np.sum((data - data[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(data, resp, diagonal, notes):
    n, d = data.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).tiny
    weights = nk / n
    means = (resp.T @ data) / nk[:, None]
    chols = np.empty((len(nk), d, d))
    for k in range(len(nk)):
        diff = data - means[k]
        cov = (resp[:, k, None] * diff).T @ diff / nk[k]
        if diagonal:
            cov = np.diag(np.diag(cov))
        chols[k] = _floored_cholesky(cov, notes, k)
    weights = weights / weights.sum()
    return weights, means, chols


def _floored_cholesky(cov, notes, k):
    d = cov.shape[0]
    try:
        L = np.linalg.cholesky(cov)
        if np.all(np.diag(L) >= CHOL_FLOOR):
            return L
    except np.linalg.LinAlgError:
        pass
    # degenerate component: lift the spectrum so the Cholesky diagonal clears the floor
    w, V = np.linalg.eigh((cov + cov.T) / 2)
    w = np.maximum(w, CHOL_FLOOR**2 * 4)
    L = np.linalg.cholesky((V * w) @ V.T + CHOL_FLOOR**2 * np.eye(d))
    notes.append(f"variance floor applied to component {k}")
    return L


def _em(data, K, rng, max_iters, tol, diagonal, notes):
    n, d = data.shape
    centers = _kmeanspp(data, K, rng)
    assign = np.argmin(((data[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.eye(K)[assign]
    weights, means, chols = _m_step(data, resp, diagonal, notes)
    trace = []
    for _ in range(max_iters):
        gm = GaussianMixture(weights, means, chols, diagonal)
        joint = gm.component_log_probs(data) + np.log(gm.weights)
        ll = logsumexp(joint, axis=1)
        trace.append(float(ll.mean()))
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(joint - ll[:, None])
        weights, means, chols = _m_step(data, resp, diagonal, notes)
    return gm, trace


def fit_gmm(data, K: int, rng: np.random.Generator, max_iters: int = 200, tol: float = 1e-6,
            restarts: int = 5, diagonal: bool = False, group: int | None = None) -> DensityModel:
    """Fit a K-component mixture by EM, best of ``restarts`` k-means++ seedings."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n, d = data.shape
    if d < 1:
        raise DensityError("data must have at least one column")
    if n < K:
        raise DensityError(f"need at least K={K} points, got {n}")
    best = None
    for _ in range(max(1, restarts)):
        notes: list = []
        gm, trace = _em(data, K, rng, max_iters, tol, diagonal, notes)
        if best is None or trace[-1] > best[1][-1]:
            best = (gm, trace, notes)
    gm, trace, notes = best
    return DensityModel(gm, group, trace[-1] * n, n, sorted(set(notes)), trace)


def fit_categorical(data, alpha: float = 1.0, order: Sequence[int] | None = None,
                    cardinalities: Sequence[int] | None = None, group: int | None = None) -> DensityModel:
    """Count-based autoregressive model: table rows are (count + alpha) / (total + alpha * d_i)."""
    data = np.atleast_2d(np.asarray(data, dtype=np.int64))
    if data.size == 0 or data.shape[0] == 0:
        raise DensityError("cannot fit a categorical model on an empty dataset")
    m = data.shape[1]
    if cardinalities is None:
        cardinalities = tuple(int(c) for c in data.max(axis=0) + 1)
    order = tuple(range(m)) if order is None else tuple(order)
    if sorted(order) != list(range(m)):
        raise DensityError("order must be a permutation of the columns")
    card = np.array(cardinalities)
    if np.any(data < 0) or np.any(data >= card):
        raise DensityError("values outside the declared column cardinalities")
    ordered = data[:, list(order)]
    tables = []
    for i in range(m):
        d = int(card[order[i]])
        table: dict = {}
        keys, counts = np.unique(ordered[:, : i + 1], axis=0, return_counts=True)
        for key, c in zip(keys, counts):
            row = table.setdefault(tuple(int(v) for v in key[:i]), np.zeros(d))
            row[key[i]] += c
        tables.append(table)
    model = AutoregressiveCategorical(tuple(int(c) for c in card), float(alpha), order, tables)
    ll = float(model.log_prob(data).sum())
    return DensityModel(model, group, ll, data.shape[0])


def log_density(model: DensityModel, x) -> np.ndarray | float:
    """Exact log density; scalar in, scalar out."""
    x = np.asarray(x)
    single = x.ndim == 1 and model.dim == x.shape[0] or x.ndim == 0
    out = model.log_prob(np.atleast_2d(x.reshape(1, -1) if single else x))
    return float(out[0]) if single else out


def sample(model: DensityModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise DensityError("n must be at least 1")
    return model.model.sample(n, rng)
