"""Potential oracles with exact query accounting, plus closed-form
constructors for Gaussians, Gaussian mixtures and the Hubbard-Stratonovich
(HS) mixture.

A potential ``f`` describes the density ``exp(-f)``. Oracles are vectorized:
``value`` maps ``(d,) -> float`` and ``(n, d) -> (n,)``; ``grad`` and ``hess``
follow the same convention.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import CapabilityError, DomainError

LOG_2PI = math.log(2.0 * math.pi)


class PotentialOracle:
    """Black-box access to ``f`` and ``grad f`` with an optional Hessian."""

    def __init__(self, dim, value, grad, hess=None, meta=None):
        self.dim = int(dim)
        self._value = value
        self._grad = grad
        self._hess = hess
        self.meta = meta

    def value(self, x):
        return self._value(np.asarray(x, dtype=float))

    def grad(self, x):
        return self._grad(np.asarray(x, dtype=float))

    @property
    def has_hess(self):
        return self._hess is not None

    def hess(self, x):
        if self._hess is None:
            raise CapabilityError("this oracle does not expose a Hessian")
        return self._hess(np.asarray(x, dtype=float))

    def __repr__(self):
        kind = self.meta.get("kind") if isinstance(self.meta, dict) else None
        return f"PotentialOracle(dim={self.dim}, kind={kind})"


@dataclass
class QueryLedger:
    """Counts of value and gradient queries; one point counts as one query."""

    value_queries: int = 0
    grad_queries: int = 0

    def merge(self, other):
        return QueryLedger(self.value_queries + other.value_queries,
                           self.grad_queries + other.grad_queries)

    __add__ = merge

    @property
    def total(self):
        return self.value_queries + self.grad_queries

    def as_dict(self):
        return {"value": self.value_queries, "grad": self.grad_queries}


def _n_points(x, dim):
    x = np.asarray(x)
    return 1 if x.ndim == 1 else x.shape[0]


def counted(oracle, ledger):
    """Wrap ``oracle`` so that every value / gradient query is tallied in ``ledger``.

    The wrapper does not forward Hessians: the query model only allows values
    and gradients.
    """

    def value(x):
        ledger.value_queries += _n_points(x, oracle.dim)
        return oracle.value(x)

    def grad(x):
        ledger.grad_queries += _n_points(x, oracle.dim)
        return oracle.grad(x)

    return PotentialOracle(oracle.dim, value, grad, None, oracle.meta)


def _cholesky(mat, name):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, atol=1e-12):
        raise DomainError(f"{name} must be a symmetric square matrix")
    try:
        return linalg.cholesky(mat, lower=True)
    except linalg.LinAlgError as exc:
        raise DomainError(f"{name} is not positive definite") from exc


class _GaussianParts:
    """Cached factorization of one Gaussian component N(u, cov)."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.chol = _cholesky(cov, "covariance")
        d = self.mean.size
        if self.chol.shape[0] != d:
            raise DomainError("mean and covariance dimensions differ")
        self.log_norm = 0.5 * d * LOG_2PI + float(np.sum(np.log(np.diag(self.chol))))
        # explicit triangular inverse: d stays small and batched matmuls are fast
        self.chol_inv = linalg.solve_triangular(self.chol, np.eye(d), lower=True)
        self.precision = self.chol_inv.T @ self.chol_inv

    def potential(self, x):
        w = (np.atleast_2d(x) - self.mean) @ self.chol_inv.T
        return 0.5 * np.sum(w * w, axis=1) + self.log_norm

    def score(self, x):
        """Gradient of the potential, always shape (n, d)."""
        return (np.atleast_2d(x) - self.mean) @ self.precision


def _unbatch(out, x):
    return out[0] if np.ndim(x) == 1 else out


def make_gaussian(mean, cov, meta=None):
    """Normalized Gaussian potential ``f = -log N(x; mean, cov)``."""
    part = _GaussianParts(mean, cov)
    d = part.mean.size

    def value(x):
        out = part.potential(x)
        return float(out[0]) if np.ndim(x) == 1 else out

    def grad(x):
        return _unbatch(part.score(x), x)

    def hess(x):
        if np.ndim(x) == 1:
            return part.precision.copy()
        return np.broadcast_to(part.precision, (np.shape(x)[0], d, d)).copy()

    meta = meta or {"kind": "gaussian", "params": {"mean": part.mean.tolist(),
                                                   "cov": np.atleast_2d(cov).tolist()}}
    return PotentialOracle(d, value, grad, hess, meta)


@dataclass(eq=False)
class MixtureSpec:
    """Weights, means and covariances of a Gaussian mixture."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _parts: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        covs = np.asarray(self.covs, dtype=float)
        if covs.ndim == 2:
            covs = covs[None]
        self.covs = covs
        m = self.weights.size
        if m == 0 or self.means.shape[0] != m or self.covs.shape[0] != m:
            raise DomainError("weights, means and covs need matching lengths")
        if np.any(self.weights <= 0.0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")
        d = self.means.shape[1]
        if self.covs.shape[1:] != (d, d):
            raise DomainError("covariance shape does not match the means")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def size(self):
        return self.weights.size

    def parts(self):
        if self._parts is None:
            self._parts = [_GaussianParts(u, c) for u, c in zip(self.means, self.covs)]
        return self._parts

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covs": self.covs.tolist()}


def mixture_terms(spec, x):
    """Per-component log(w_i) - f_i(x) and scores, as arrays (n, m) and (n, m, d)."""
    parts = spec.parts()
    logw = np.log(spec.weights)
    logs = np.stack([lw - p.potential(x) for lw, p in zip(logw, parts)], axis=1)
    scores = np.stack([p.score(x) for p in parts], axis=1)
    return logs, scores


def _responsibilities(logs):
    top = np.max(logs, axis=1, keepdims=True)
    e = np.exp(logs - top)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (top + np.log(s))[:, 0]


def mixture_potential_hessian(spec, x):
    """-Hessian of log p for a mixture, batch shape (n, d, d).

    Responsibility-weighted precision minus the covariance of component scores.
    """
    logs, scores = mixture_terms(spec, x)
    resp, _ = _responsibilities(logs)
    precisions = np.stack([p.precision for p in spec.parts()])
    mean_score = np.einsum("nm,nmd->nd", resp, scores)
    second = np.einsum("nm,nmd,nme->nde", resp, scores, scores)
    cov = second - mean_score[:, :, None] * mean_score[:, None, :]
    return np.einsum("nm,mde->nde", resp, precisions) - cov


def make_mixture(spec, meta=None):
    """Potential ``-log sum_i w_i N(x; u_i, cov_i)`` with analytic Hessian."""
    if not isinstance(spec, MixtureSpec):
        spec = MixtureSpec(**spec)

    def value(x):
        logs, _ = mixture_terms(spec, x)
        _, lse = _responsibilities(logs)
        return float(-lse[0]) if np.ndim(x) == 1 else -lse

    def grad(x):
        logs, scores = mixture_terms(spec, x)
        resp, _ = _responsibilities(logs)
        return _unbatch(np.einsum("nm,nmd->nd", resp, scores), x)

    def hess(x):
        return _unbatch(mixture_potential_hessian(spec, x), x)

    meta = meta or {"kind": "mixture", "params": spec.to_dict()}
    oracle = PotentialOracle(spec.dim, value, grad, hess, meta)
    oracle.spec = spec
    return oracle


def _log_2cosh(x):
    a = np.abs(x)
    return a + np.log1p(np.exp(-2.0 * a))


def make_hs_mixture(J, h, meta=None):
    """HS mixture potential ``x'J^-1 x / 2 - h'J^-1 x - sum_i log(2 cosh x_i)``.

    The density is proportional to the 2^d-component mixture returned by
    :func:`hs_components`. The additive constant is left at zero.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    chol = _cholesky(J, "J")
    d = h.size
    if J.shape[0] != d:
        raise DomainError("J and h dimensions differ")
    J_inv = linalg.cho_solve((chol, True), np.eye(d))
    J_inv_h = J_inv @ h

    def value(x):
        x2 = np.atleast_2d(x)
        quad = 0.5 * np.einsum("nd,de,ne->n", x2, J_inv, x2)
        out = quad - x2 @ J_inv_h - np.sum(_log_2cosh(x2), axis=1)
        return float(out[0]) if np.ndim(x) == 1 else out

    def grad(x):
        x2 = np.atleast_2d(x)
        return _unbatch(x2 @ J_inv - J_inv_h - np.tanh(x2), x)

    def hess(x):
        x2 = np.atleast_2d(x)
        sech2 = 1.0 - np.tanh(x2) ** 2
        out = J_inv[None] - sech2[:, :, None] * np.eye(d)[None]
        return _unbatch(out, x)

    meta = meta or {"kind": "hs", "params": {"J": J.tolist(), "h": h.tolist()}}
    return PotentialOracle(d, value, grad, hess, meta)


def hs_components(J, h):
    """Explicit Gaussian-mixture form of the HS density.

    Completing the square in each sign pattern s gives the component
    N(J s + h, J) with weight proportional to exp(m' J^-1 m / 2), m = J s + h.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    h = np.asarray(h, dtype=float).ravel()
    d = h.size
    if d > 16:
        raise DomainError("explicit HS mixture limited to d <= 16")
    chol = _cholesky(J, "J")
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=d)))
    means = signs @ J.T + h
    solved = linalg.cho_solve((chol, True), means.T).T
    logw = 0.5 * np.sum(means * solved, axis=1)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    covs = np.broadcast_to(J, (signs.shape[0], d, d)).copy()
    return MixtureSpec(w, means, covs)


def scale_potential(oracle, L):
    """Potential ``x -> f(x / sqrt(L))``.

    If ``f`` is L-smooth with second moment M, the result is 1-smooth with
    second moment L * M.
    """
    if not L > 0:
        raise DomainError("scale factor L must be positive")
    s = 1.0 / math.sqrt(L)

    def value(x):
        return oracle.value(x * s)

    def grad(x):
        return oracle.grad(x * s) * s

    hess = None
    if oracle.has_hess:
        def hess(x):
            return oracle.hess(x * s) * (s * s)

    meta = {"kind": "scaled", "params": {"L": L}, "base": oracle.meta}
    return PotentialOracle(oracle.dim, value, grad, hess, meta)
