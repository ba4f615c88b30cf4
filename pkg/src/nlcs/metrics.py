"""Ground-truth measurements at desk scale: total variation by quadrature and
by histogram, second moments, smoothness probes and the Poincare comparison
bound."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from . import numkit
from .errors import DegeneracyError, DomainError, EvaluationError, GridTooSmallError
from .rng import generator, stream

MAX_MASS_DEFECT = 1e-3
MIN_HISTOGRAM_SAMPLES = 1000


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor trapezoid grid on a box in one or two dimensions."""

    bounds: tuple
    resolution: int = 2001

    def __post_init__(self):
        b = tuple(tuple(float(v) for v in pair) for pair in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) not in (1, 2):
            raise DomainError("quadrature grids support d in {1, 2}")
        if self.resolution < 64:
            raise DomainError("quadrature resolution must be at least 64")
        if any(hi <= lo for lo, hi in b):
            raise DomainError("quadrature bounds must be increasing")

    @property
    def d(self):
        return len(self.bounds)

    def axes(self):
        return [np.linspace(lo, hi, self.resolution) for lo, hi in self.bounds]

    def nodes_and_log_weights(self):
        axes = self.axes()
        logw_axes = []
        for ax in axes:
            w = np.full(ax.size, ax[1] - ax[0])
            w[0] = w[-1] = 0.5 * (ax[1] - ax[0])
            logw_axes.append(np.log(w))
        if self.d == 1:
            return axes[0][:, None], logw_axes[0]
        X, Y = np.meshgrid(axes[0], axes[1], indexing="ij")
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        logw = (logw_axes[0][:, None] + logw_axes[1][None, :]).ravel()
        return nodes, logw


@dataclass
class TvResult:
    tv: float
    mass_defect: float
    method: str


def _chunked_values(oracle, nodes, chunk=262144):
    out = np.empty(nodes.shape[0])
    for start in range(0, nodes.shape[0], chunk):
        out[start:start + chunk] = oracle.value(nodes[start:start + chunk])
    return out


def log_density_on_grid(oracle, grid):
    """Normalized log density at the grid nodes, plus nodes and log weights."""
    nodes, logw = grid.nodes_and_log_weights()
    f = _chunked_values(oracle, nodes)
    if np.any(np.isnan(f)):
        raise EvaluationError("potential returned NaN on the quadrature grid")
    log_z = numkit.log_sum_exp(logw - f)
    return nodes, logw, -f - log_z


def _gaussian_envelope_defect(nodes, logw, logp, bounds):
    """Tail mass outside the box under a per-axis Gaussian envelope."""
    p = np.exp(logp + logw)
    defect = 0.0
    for j, (lo, hi) in enumerate(bounds):
        mean = float(np.sum(p * nodes[:, j]))
        sd = math.sqrt(max(float(np.sum(p * (nodes[:, j] - mean) ** 2)), 1e-300))
        defect += stats.norm.sf((hi - mean) / sd) + stats.norm.cdf((lo - mean) / sd)
    return float(defect)


def tv_quadrature(f1, f2, grid):
    """Total variation between exp(-f1) and exp(-f2) on a quadrature grid."""
    if f1.dim != grid.d or f2.dim != grid.d:
        raise DomainError("oracle dimension does not match the grid")
    nodes, logw, lp1 = log_density_on_grid(f1, grid)
    _, _, lp2 = log_density_on_grid(f2, grid)
    defect = max(_gaussian_envelope_defect(nodes, logw, lp1, grid.bounds),
                 _gaussian_envelope_defect(nodes, logw, lp2, grid.bounds))
    if defect > MAX_MASS_DEFECT:
        raise GridTooSmallError(f"box misses an estimated mass {defect:.3g}")
    w = np.exp(logw)
    tv = 0.5 * float(np.sum(w * np.abs(np.exp(lp1) - np.exp(lp2))))
    return TvResult(tv, defect, "quadrature")


def freedman_diaconis_bins(x):
    x = np.asarray(x, dtype=float)
    q75, q25 = np.percentile(x, [75, 25])
    width = 2.0 * (q75 - q25) * x.size ** (-1.0 / 3.0)
    span = x.max() - x.min()
    if width <= 0 or span <= 0:
        # degenerate spread: fall back to Sturges
        return int(math.ceil(math.log2(x.size))) + 1
    return max(1, int(math.ceil(span / width)))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _cell_masses_1d(oracle, edges):
    """Integral of exp(-f) over each cell, via 8-point Gauss-Legendre per cell,
    returned as logs relative to a shared offset."""
    a, b = edges[:-1], edges[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * _GL_NODES[None, :]
    f = _chunked_values(oracle, pts.reshape(-1, 1)).reshape(pts.shape)
    logs = -f + np.log(_GL_WEIGHTS)[None, :] + np.log(half)[:, None]
    return special.logsumexp(logs, axis=1)


def _cell_masses_2d(oracle, ex, ey):
    hx = 0.5 * np.diff(ex)
    hy = 0.5 * np.diff(ey)
    cx = 0.5 * (ex[:-1] + ex[1:])
    cy = 0.5 * (ey[:-1] + ey[1:])
    px = cx[:, None] + hx[:, None] * _GL_NODES[None, :]
    py = cy[:, None] + hy[:, None] * _GL_NODES[None, :]
    k = _GL_NODES.size
    X = np.broadcast_to(px[:, None, :, None], (cx.size, cy.size, k, k))
    Y = np.broadcast_to(py[None, :, None, :], (cx.size, cy.size, k, k))
    pts = np.column_stack([X.ravel(), Y.ravel()])
    f = _chunked_values(oracle, pts).reshape(X.shape)
    logw = np.log(_GL_WEIGHTS)
    logs = (-f + logw[None, None, :, None] + logw[None, None, None, :]
            + np.log(hx)[:, None, None, None] + np.log(hy)[None, :, None, None])
    return special.logsumexp(logs.reshape(cx.size, cy.size, -1), axis=2)


def _extend_edges(edges, factor=3.0):
    width = edges[1] - edges[0]
    span = edges[-1] - edges[0]
    n_pad = max(1, int(math.ceil(factor * span / width)))
    left = edges[0] - width * np.arange(n_pad, 0, -1)
    right = edges[-1] + width * np.arange(1, n_pad + 1)
    return np.concatenate([left, edges, right]), n_pad


def _axis_edges(x, bins, bounds):
    lo, hi = (x.min(), x.max()) if bounds is None else bounds
    if hi <= lo:
        pad = max(abs(lo), 1.0) * 1e-3
        lo, hi = lo - pad, hi + pad
    n = freedman_diaconis_bins(x) if bins is None else int(bins)
    return np.linspace(lo, hi, n + 1)


def tv_histogram(samples, oracle, bins=None, bounds=None):
    """TV between the empirical histogram and the binned density exp(-f).

    Cells outside the histogram range are lumped into one extra cell; the
    density is normalized on a box three range-widths wider on every side.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if d not in (1, 2):
        raise DomainError("tv_histogram supports d in {1, 2}")
    if n < MIN_HISTOGRAM_SAMPLES:
        raise DomainError(f"tv_histogram needs at least {MIN_HISTOGRAM_SAMPLES} samples")
    axis_bounds = [None] * d if bounds is None else ([bounds] if d == 1 else list(bounds))
    axis_bins = [bins] * d if bins is None or np.ndim(bins) == 0 else list(bins)
    edges = [_axis_edges(x[:, j], axis_bins[j], axis_bounds[j]) for j in range(d)]
    counts, _ = np.histogramdd(x, bins=edges)
    emp = counts / n
    emp_out = 1.0 - emp.sum()
    wide = [_extend_edges(e) for e in edges]
    if d == 1:
        logm = _cell_masses_1d(oracle, wide[0][0])
    else:
        logm = _cell_masses_2d(oracle, wide[0][0], wide[1][0])
    logm = logm - special.logsumexp(logm)
    masses = np.exp(logm)
    inner = tuple(slice(p, p + e.size - 1) for (_, p), e in zip(wide, edges))
    true_in = masses[inner]
    true_out = max(0.0, 1.0 - float(true_in.sum()))
    if true_out > 0.5:
        raise DomainError("more than half of the density lies outside the bin range")
    tv = 0.5 * (float(np.abs(emp - true_in).sum()) + abs(emp_out - true_out))
    return TvResult(tv, true_out, "histogram")


def second_moment(oracle, method="quadrature", grid=None, proposal=None, n=20000, seed=0):
    """E||X||^2 under exp(-f).

    Returns ``(value, stderr)``; the quadrature route reports stderr 0.
    """
    if method == "quadrature":
        if grid is None:
            raise DomainError("quadrature needs a grid")
        nodes, logw, logp = log_density_on_grid(oracle, grid)
        p = np.exp(logp + logw)
        return float(np.sum(p * np.sum(nodes * nodes, axis=1))), 0.0
    if method == "importance":
        if proposal is None:
            raise DomainError("importance sampling needs a proposal")
        rng = generator(seed, "second_moment")
        y = proposal.sample(rng, n)
        est, se, _ = importance_mean(oracle, proposal, y, np.sum(y * y, axis=1))
        return est, se
    raise DomainError(f"unknown method {method!r}")


def importance_mean(oracle, proposal, y, phi, min_ess=50.0):
    """Self-normalized importance estimate of E[phi] with its delta-method stderr."""
    logw = -np.asarray(oracle.value(y)) - proposal.log_density(y)
    logw = logw - np.max(logw)
    w = np.exp(logw)
    w /= w.sum()
    ess = 1.0 / float(np.sum(w * w))
    if ess < min_ess:
        raise DegeneracyError(f"effective sample size {ess:.1f} below {min_ess}")
    est = float(np.sum(w * phi))
    se = math.sqrt(float(np.sum(w * w * (phi - est) ** 2)))
    return est, se, ess


class GaussianProposal:
    """Isotropic proposal N(mean, sigma^2 I)."""

    def __init__(self, d, sigma, mean=None):
        self.d = d
        self.sigma = float(sigma)
        self.mean = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)

    def sample(self, rng, n):
        return self.mean + self.sigma * rng.standard_normal((n, self.d))

    def log_density(self, y):
        r2 = np.sum((np.atleast_2d(y) - self.mean) ** 2, axis=1)
        return -0.5 * r2 / self.sigma**2 - self.d * math.log(self.sigma) - 0.5 * self.d * math.log(2 * math.pi)


class BallGaussianProposal:
    """Mixture of the uniform law on B_radius and N(0, sigma^2 I)."""

    def __init__(self, d, radius, sigma, ball_weight=0.5):
        self.d = d
        self.radius = float(radius)
        self.gauss = GaussianProposal(d, sigma)
        self.ball_weight = float(ball_weight)
        self.log_ball = -numkit.log_ball_volume(d, radius)

    def sample(self, rng, n):
        n_ball = rng.binomial(n, self.ball_weight)
        z = rng.standard_normal((n_ball, self.d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        z *= self.radius * rng.uniform(size=(n_ball, 1)) ** (1.0 / self.d)
        out = np.vstack([z, self.gauss.sample(rng, n - n_ball)])
        return out[rng.permutation(n)]

    def log_density(self, y):
        y = np.atleast_2d(y)
        inside = np.sum(y * y, axis=1) <= self.radius**2
        log_ball = np.where(inside, self.log_ball + math.log(self.ball_weight), -np.inf)
        log_gauss = self.gauss.log_density(y) + math.log1p(-self.ball_weight)
        return np.logaddexp(log_ball, log_gauss)


def ball_points(d, radius, n, seed=0, center=None):
    """Scrambled Sobol points mapped into a ball."""
    sampler = stats.qmc.Sobol(d + 1, scramble=True, seed=np.random.default_rng(stream(seed, "ball_points")))
    m = max(1, int(math.ceil(math.log2(max(n, 2)))))
    u = sampler.random_base2(m)[:n]
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    z = stats.norm.ppf(u[:, :d])
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    pts = z * (radius * u[:, d:] ** (1.0 / d))
    return pts if center is None else pts + np.asarray(center, dtype=float)


def hessian_at(oracle, x, finite_difference=False):
    """Analytic Hessian when available and not overridden, else fd of the gradient."""
    if oracle.has_hess and not finite_difference:
        return np.asarray(oracle.hess(x))
    return numkit.fd_jacobian(oracle.grad, x)


def smoothness_probe(oracle, region=None, n_points=1000, seed=0, points=None,
                     finite_difference=False):
    """Largest Hessian operator norm over probe points.

    ``region`` is ``(center, radius)``; probes are quasi-random points in that
    ball plus any caller-supplied ``points``.
    """
    probes = []
    if region is not None:
        center, radius = region
        probes.append(ball_points(oracle.dim, radius, n_points, seed, center))
    if points is not None:
        probes.append(np.atleast_2d(np.asarray(points, dtype=float)))
    if not probes:
        raise DomainError("smoothness_probe needs a region or points")
    best = 0.0
    for x in np.vstack(probes):
        H = hessian_at(oracle, x, finite_difference)
        if not np.all(np.isfinite(H)):
            raise EvaluationError(f"non-finite Hessian entry at {x.tolist()}")
        best = max(best, numkit.opnorm_sym(H))
    return best


def gaussian_poincare_constant(d, M, eps):
    return 2.0 * d * eps / M


def poincare_comparison_bound(f_pi, f_gamma, M, eps, d, probes, log_z_pi=0.0):
    """C_PI(gamma) * min(r) / max(r)^2 with r = p_pi / p_gamma over the probes.

    ``f_gamma`` must be normalized; ``log_z_pi`` normalizes ``f_pi``.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    log_r = np.asarray(f_gamma.value(probes)) - np.asarray(f_pi.value(probes)) - log_z_pi
    log_bound = math.log(gaussian_poincare_constant(d, M, eps)) + float(log_r.min()) - 2.0 * float(log_r.max())
    return math.exp(log_bound)
