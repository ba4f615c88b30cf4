"""Smoothness of log-densities along the Ornstein-Uhlenbeck flow.

Three ways to get the Hessian of ``log p_t``:

* closed form for Gaussian mixtures (:func:`evolve_mixture` then
  :func:`mixture_log_hessian`);
* finite differences of any potential;
* the covariance identity
  ``Hess log p_t(x0) = Cov_nu[Y] / v^2 - I / v`` with ``v = 1 - exp(-2t)``,
  where ``nu`` tilts ``N(x0, v I)`` by ``p(y / exp(-t))``; estimated by
  self-normalized importance sampling.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import numkit
from .errors import DegeneracyError, DomainError
from .instances import build_stitched
from .metrics import ball_points
from .oracle import MixtureSpec, hs_components, mixture_potential_hessian, mixture_terms
from .rng import generator

CLOSED_FORM = "closed-form"
FINITE_DIFFERENCE = "finite-difference"
COVARIANCE_IDENTITY = "covariance-identity"
MIN_ESS = 50.0


@dataclass(frozen=True)
class OuTime:
    t: float

    def __post_init__(self):
        if not (self.t >= 0.0):
            raise DomainError("OU time must be non-negative")

    @property
    def shrink(self):
        return math.exp(-self.t)

    @property
    def var(self):
        return -math.expm1(-2.0 * self.t)


def _as_time(t):
    return t if isinstance(t, OuTime) else OuTime(float(t))


@dataclass
class HessianProbe:
    point: np.ndarray
    t: OuTime
    hessian: np.ndarray
    opnorm: float
    method: str
    mc_stderr: float = None
    extra: dict = field(default_factory=dict)


def evolve_mixture(spec, t):
    """Law of X_t when X_0 follows the mixture: means shrink by exp(-t) and
    covariances become exp(-2t) cov + (1 - exp(-2t)) I."""
    ot = _as_time(t)
    keep = math.exp(-2.0 * ot.t)
    eye = np.eye(spec.dim)
    covs = keep * spec.covs + ot.var * eye[None]
    return MixtureSpec(spec.weights.copy(), spec.means * ot.shrink, covs)


def mixture_log_hessian(spec, x, pairwise=False):
    """Hessian of log p for a Gaussian mixture at a single point ``x``.

    The default route is precision averaged by responsibilities minus the
    covariance of component scores; ``pairwise=True`` sums the equivalent
    O(m^2) pair terms instead.
    """
    x = np.asarray(x, dtype=float)
    if not pairwise:
        return -mixture_potential_hessian(spec, x)[0]
    logs, scores = mixture_terms(spec, x)
    top = logs.max()
    r = np.exp(logs[0] - top)
    r /= r.sum()
    s = scores[0]
    d = spec.dim
    cross = np.zeros((d, d))
    for i in range(spec.size):
        for j in range(i + 1, spec.size):
            diff = s[i] - s[j]
            cross += r[i] * r[j] * np.outer(diff, diff)
    precisions = np.stack([p.precision for p in spec.parts()])
    return cross - np.einsum("m,mde->de", r, precisions)


def closed_form_probe(spec, t, x):
    ot = _as_time(t)
    H = mixture_log_hessian(evolve_mixture(spec, ot), x)
    return HessianProbe(np.asarray(x, dtype=float), ot, H, numkit.opnorm_sym(H), CLOSED_FORM)


def fd_probe(oracle, t, x):
    """Finite-difference Hessian of ``-f`` for an oracle already at time ``t``."""
    H = -numkit.fd_jacobian(oracle.grad, np.asarray(x, dtype=float))
    return HessianProbe(np.asarray(x, dtype=float), _as_time(t), H, numkit.opnorm_sym(H), FINITE_DIFFERENCE)


def _tilted_samples(oracle, ot, x0, n, seed):
    if ot.var <= 1e-8:
        raise DomainError("covariance identity needs 1 - exp(-2t) > 1e-8")
    if n < 1000:
        raise DomainError("covariance identity needs n >= 1000")
    rng = generator(seed, "cov_identity")
    y = x0 + math.sqrt(ot.var) * rng.standard_normal((n, x0.size))
    logw = -np.asarray(oracle.value(y / ot.shrink), dtype=float)
    logw -= logw.max()
    w = np.exp(logw)
    w /= w.sum()
    ess = 1.0 / float(np.sum(w * w))
    if ess < MIN_ESS:
        raise DegeneracyError(f"effective sample size {ess:.1f} < {MIN_ESS:.0f}; "
                              "increase n or move x0")
    return y, w, ess


def score_hessian_via_cov(oracle, t, x0, n=20000, seed=0):
    """Hessian of log p_t at ``x0`` by the covariance identity.

    ``oracle`` is the potential of p at time zero. ``mc_stderr`` is the largest
    delta-method standard error over matrix entries.
    """
    ot = _as_time(t)
    x0 = np.asarray(x0, dtype=float)
    y, w, ess = _tilted_samples(oracle, ot, x0, n, seed)
    mean = w @ y
    c = y - mean
    prods = c[:, :, None] * c[:, None, :]
    cov = np.einsum("n,nde->de", w, prods)
    se = np.sqrt(np.einsum("n,nde->de", w * w, (prods - cov) ** 2)) / ot.var**2
    H = cov / ot.var**2 - np.eye(x0.size) / ot.var
    H = 0.5 * (H + H.T)
    return HessianProbe(x0, ot, H, numkit.opnorm_sym(H), COVARIANCE_IDENTITY,
                        float(se.max()), {"stderr": se, "ess": ess, "samples": y, "weights": w})


def stitched_blowup_probe(u, t, n=200000, seed=0):
    """Covariance-identity probe of the stitched instance at ``x0 = exp(-t) u / 2``.

    ``extra`` carries ``ratio`` = opnorm / (exp(-2t)|u|^2 - 1) and ``delta_t``,
    the weight of the non-Gaussian part of the tilted law, recovered from its
    mass in the ball ``|y - exp(-t) u| <= 0.5 exp(-t) |u|``.
    """
    u = np.asarray(u, dtype=float).ravel()
    ot = _as_time(t)
    keep = ot.shrink**2
    if keep >= 0.1:
        raise DomainError("blow-up probe needs exp(-2t) < 0.1")
    oracle = build_stitched(u)
    x0 = 0.5 * ot.shrink * u
    probe = score_hessian_via_cov(oracle, ot, x0, n, seed)
    y, w = probe.extra.pop("samples"), probe.extra.pop("weights")
    s = float(u @ u)
    radius = 0.5 * ot.shrink * math.sqrt(s)
    in_ball = np.sum((y - ot.shrink * u) ** 2, axis=1) <= radius**2
    p_nu = float(w[in_ball].sum())
    sigma_sq = keep * ot.var
    offset = 0.5 * ot.shrink**3 * u - ot.shrink * u
    p_n1 = float(stats.ncx2.cdf(radius**2 / sigma_sq, df=u.size, nc=float(offset @ offset) / sigma_sq))
    probe.extra["delta_t"] = (p_nu - p_n1) / (1.0 - p_n1)
    probe.extra["ratio"] = probe.opnorm / (keep * s - 1.0)
    probe.extra["lower_bound"] = keep * s - 1.0
    return probe


def hs_delta(J):
    """Largest delta with delta I <= J <= (1 - delta) I."""
    ev = np.linalg.eigvalsh(np.atleast_2d(J))
    return min(ev.min(), 1.0 - ev.max())


def hs_evolution_bounds(J, h, t, delta):
    """Spectral bracket (lo, hi) for -Hess log p_t of the HS mixture."""
    if not 0.0 < delta < 0.5:
        raise DomainError("delta must lie in (0, 1/2)")
    if hs_delta(J) < delta - 1e-12:
        raise DomainError("J must satisfy delta I <= J <= (1 - delta) I")
    if math.isinf(t):
        return 1.0, 1.0
    keep = math.exp(-2.0 * _as_time(t).t)
    lo = 1.0 / (1.0 + (1.0 - 2.0 * delta) / delta * keep)
    hi = 1.0 / (1.0 - (1.0 - delta) * keep)
    return lo, hi


def hs_evolved_spectra(J, h, t, points):
    """Eigenvalues of -Hess log p_t for the HS mixture at each point, via the
    explicit 2^d-component form."""
    spec = evolve_mixture(hs_components(J, h), t)
    Hs = mixture_potential_hessian(spec, np.atleast_2d(points))
    return np.linalg.eigvalsh(Hs)


def unequal_cov_spec(u1, u2):
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    d = u1.size
    return MixtureSpec([0.5, 0.5], [u1, u2], [0.5 * np.eye(d), np.eye(d)])


def unequal_cov_point(u1, u2):
    """Point on the sphere where the two component potentials agree."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    d = u1.size
    c = 2.0 * u1 - u2
    rho = math.sqrt(d * math.log(2.0) + 2.0 * float((u1 - u2) @ (u1 - u2)))
    norm_c = np.linalg.norm(c)
    direction = c / norm_c if norm_c > 0 else np.eye(d)[0]
    return c + rho * direction


def two_gaussian_unequal_cov_probe(u1, u2, d=None):
    """Operator norm of Hess log p for 0.5 N(u1, I/2) + 0.5 N(u2, I) at the
    point from :func:`unequal_cov_point`."""
    u1 = np.zeros(d) if u1 is None else np.asarray(u1, dtype=float)
    u2 = np.zeros(d) if u2 is None else np.asarray(u2, dtype=float)
    if d is not None and (u1.size != d or u2.size != d):
        raise DomainError("means must have dimension d")
    x = unequal_cov_point(u1, u2)
    return numkit.opnorm_sym(mixture_log_hessian(unequal_cov_spec(u1, u2), x))


def mixture_probe_points(spec, n=200, seed=0):
    """Quasi-random points in B_{3 max|u_i|} plus midpoints of all mean pairs."""
    radius = 3.0 * max(float(np.linalg.norm(spec.means, axis=1).max()), 1.0)
    pts = [ball_points(spec.dim, radius, n, seed)]
    mids = [0.5 * (spec.means[i] + spec.means[j])
            for i in range(spec.size) for j in range(i + 1, spec.size)]
    if mids:
        pts.append(np.array(mids))
    return np.vstack(pts)


def negative_part_norm(H):
    """Largest positive eigenvalue of Hess log p, i.e. the size of the
    non-convex part of the potential."""
    return max(0.0, float(np.linalg.eigvalsh(H).max()))
