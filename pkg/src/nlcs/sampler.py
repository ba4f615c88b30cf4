"""Grid estimation, smooth truncation and averaged Langevin Monte Carlo.

Pipeline: sweep a cube grid to estimate the minimum of ``f`` and the
normalizing constant, build a truncated potential ``f_pi`` that flattens ``f``
where it is large and switches to a wide Gaussian far away, then run
unadjusted Langevin dynamics on ``f_pi`` stopped at a uniformly random time.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics, numkit
from .errors import BudgetError, DivergenceError, DomainError
from .oracle import PotentialOracle, QueryLedger, counted
from .rng import generator

log = logging.getLogger(__name__)

DEFAULT_CUBE_BUDGET = 2e7
DEFAULT_MAX_STEPS = 20000
RADIAL_BINS = 512
SLAB = 65536


@dataclass(frozen=True)
class GridSpec:
    d: int
    L: float
    M: float
    eps: float

    def __post_init__(self):
        if self.d < 1:
            raise DomainError("dimension must be at least 1")
        if not (self.L > 0 and self.M > 0):
            raise DomainError("L and M must be positive")
        if not 0.0 < self.eps < 1.0:
            raise DomainError("eps must lie in (0, 1)")

    @property
    def ell(self):
        return math.sqrt(self.d * self.eps / (self.L**2 * self.M)) / 64.0

    @property
    def R(self):
        return math.sqrt(32.0 * self.M / self.eps)

    @property
    def R0(self):
        return 2.0 * self.R + math.sqrt(self.d) * self.ell

    def log_projected_cubes(self):
        return numkit.log_ball_volume(self.d, self.R0) - self.d * math.log(self.ell)

    def log_cube_bound(self):
        return self.d * math.log(2**10 * 5 * self.L * self.M / (self.d * self.eps))


@dataclass
class GridEstimates:
    f_hat_star: float
    log_Z_hat: float
    cubes_visited: int
    spec: GridSpec
    radial_min: np.ndarray = field(repr=False)
    radial_norm: np.ndarray = field(repr=False)


def _int_sqrt(x):
    a = int(math.floor(math.sqrt(max(x, 0.0))))
    while (a + 1) ** 2 <= x:
        a += 1
    while a > 0 and a * a > x:
        a -= 1
    return a


def _cost(k):
    return max(k * k, (k + 1) * (k + 1))


def _near(k):
    return max(k, -k - 1, 0)


def _prefixes(d, budget):
    """Odometer over the first d-1 cube indices with room left for the last axis."""
    if d == 1:
        yield (), 0, 0
        return

    def rec(prefix, used, near_sq):
        axis = len(prefix)
        remaining_axes = d - 1 - axis
        a = _int_sqrt(budget - used - remaining_axes)
        for k in range(-a, a):
            c = used + _cost(k)
            if c + remaining_axes > budget:
                continue
            nxt = prefix + (k,)
            if remaining_axes == 1:
                yield nxt, c, near_sq + _near(k) ** 2
            else:
                yield from rec(nxt, c, near_sq + _near(k) ** 2)

    yield from rec((), 0, 0)


def _row(prefix, used, budget):
    a = _int_sqrt(budget - used)
    return np.arange(-a, a) if a >= 1 else np.arange(0)


class _SlabSummary:
    def __init__(self):
        self.log_terms = []
        self.f_min = math.inf
        self.count = 0
        self.radial_min = np.full(RADIAL_BINS, np.inf)
        self.radial_norm = np.zeros(RADIAL_BINS)


def _sweep_slab(oracle, spec, rows, budget, near_budget):
    ell, d = spec.ell, spec.d
    log_vol = d * math.log(ell)
    out = _SlabSummary()
    for prefix, near_sq, ks in rows:
        if ks.size == 0:
            continue
        centers = np.empty((ks.size, d))
        if d > 1:
            centers[:, :-1] = (np.asarray(prefix, dtype=float) + 0.5) * ell
        centers[:, -1] = (ks + 0.5) * ell
        f = np.asarray(oracle.value(centers), dtype=float)
        if not np.all(np.isfinite(f)):
            raise DomainError("potential returned a non-finite value on the grid")
        out.count += ks.size
        out.log_terms.append(numkit.log_sum_exp(log_vol - f - 0.5 * d))
        near_last = np.maximum.reduce([ks, -ks - 1, np.zeros_like(ks)])
        in_j = near_sq + near_last**2 <= near_budget
        if np.any(in_j):
            out.f_min = min(out.f_min, float(f[in_j].min()))
        norms = np.linalg.norm(centers, axis=1)
        bins = np.minimum((norms / spec.R0 * RADIAL_BINS).astype(int), RADIAL_BINS - 1)
        order = np.lexsort((f, bins))
        first = np.unique(bins[order], return_index=True)[1]
        b, idx = bins[order][first], order[first]
        better = f[idx] < out.radial_min[b]
        out.radial_min[b[better]] = f[idx[better]]
        out.radial_norm[b[better]] = norms[idx[better]]
    return out


def _slabs(spec, budget):
    """Fixed partition of the grid into work units, independent of thread count."""
    d = spec.d
    if d == 1:
        ks = _row((), 0, budget)
        for start in range(0, ks.size, SLAB):
            yield [((), 0, ks[start:start + SLAB])]
        return
    batch, size = [], 0
    for prefix, used, near_sq in _prefixes(d, budget):
        ks = _row(prefix, used, budget)
        batch.append((prefix, near_sq, ks))
        size += ks.size
        if size >= SLAB // 4:
            yield batch
            batch, size = [], 0
    if batch:
        yield batch


def estimate_grid(oracle, L, M, eps, d=None, budget=DEFAULT_CUBE_BUDGET, threads=1):
    """Grid estimates of the minimum and the normalizing constant.

    Cubes of side ``ell`` with all vertices in B_R0 are swept in odometer
    order; the potential is queried once per cube center.
    """
    d = oracle.dim if d is None else d
    spec = GridSpec(d, L, M, eps)
    log_proj = spec.log_projected_cubes()
    if log_proj > math.log(budget):
        projected = math.exp(min(log_proj, 700.0))
        raise BudgetError(f"projected cube count {projected:.3e} exceeds budget {budget:.3e}",
                          projected=projected, bound=math.exp(min(spec.log_cube_bound(), 700.0)))
    budget_units = (spec.R0 / spec.ell) ** 2
    near_units = (2.0 * spec.R / spec.ell) ** 2

    def work(rows):
        ledger = QueryLedger()
        summary = _sweep_slab(counted(oracle, ledger), spec, rows, budget_units, near_units)
        return summary, ledger

    slabs = _slabs(spec, budget_units)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, slabs))
    else:
        results = [work(s) for s in slabs]
    terms, f_min, count = [], math.inf, 0
    radial_min = np.full(RADIAL_BINS, np.inf)
    radial_norm = np.zeros(RADIAL_BINS)
    for summary, ledger in results:
        terms.extend(summary.log_terms)
        f_min = min(f_min, summary.f_min)
        count += summary.count
        better = summary.radial_min < radial_min
        radial_min[better] = summary.radial_min[better]
        radial_norm[better] = summary.radial_norm[better]
    if not math.isfinite(f_min):
        raise DomainError("no cube meets B_2R")
    log_z = numkit.log_sum_exp(terms)
    log.info("grid sweep visited %d cubes", count)
    return GridEstimates(f_min + 0.5 * d, log_z, count, spec, radial_min, radial_norm)


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


class TruncatedPotential(PotentialOracle):
    """Truncated potential ``f_pi`` built from grid estimates.

    Inside B_R it equals ``f`` smoothly capped at ``h2`` (plus log Z_hat); past
    B_2R it is the wide Gaussian potential ``f_gamma - log eps``; the two are
    blended on R..2R. Each value costs at most one value query of ``f`` and
    each gradient one value plus one gradient query; nothing is queried
    outside B_2R.
    """

    def __init__(self, oracle, est, L, M, eps):
        d = oracle.dim
        self.base = oracle
        self.grid = est
        self.L, self.M, self.eps = L, M, eps
        self.R = est.spec.R
        self.log_Z_hat = est.log_Z_hat
        self.h1 = (est.f_hat_star + numkit.log_ball_volume(d, 2.0 * self.R)
                   + 0.5 * d * math.log(L) + math.log(4.0 / eps))
        self.h2 = self.h1 + 0.5 * d * math.log(L * M / (d * eps))
        self.gamma_const = 0.5 * d * math.log(2.0 * math.pi * M / (d * eps))
        self.tail_curv = eps * d / M
        hess = self._hess if oracle.has_hess else None
        super().__init__(d, self._value, self._grad, hess,
                         {"kind": "truncated", "base": oracle.meta})

    def f_gamma(self, x):
        return 0.5 * self.tail_curv * np.sum(np.asarray(x) ** 2, axis=-1) + self.gamma_const

    def gamma_oracle(self):
        """The normalized wide Gaussian as an oracle."""
        c = self.tail_curv
        return PotentialOracle(self.dim, lambda x: self.f_gamma(x), lambda x: c * np.asarray(x),
                               lambda x: c * np.eye(self.dim), {"kind": "gaussian_tail"})

    def _cap(self, fm):
        delta = self.h2 - self.h1
        z = (self.h2 - fm) / delta
        g = np.asarray(numkit.mollify(z))
        fbar = np.where(g == 0.0, self.h2, g * fm + (1.0 - g) * self.h2)
        return z, g, fbar

    def _blend(self, sq):
        R2 = self.R**2
        return (sq - R2) / (3.0 * R2)

    def value_from(self, fm, sq):
        """f_pi from the base value ``fm`` and squared norm ``sq``; no queries."""
        fm = np.asarray(fm, dtype=float)
        sq = np.asarray(sq, dtype=float)
        _, _, fbar = self._cap(fm)
        G = np.asarray(numkit.mollify(self._blend(sq)))
        tail = 0.5 * self.tail_curv * sq + self.gamma_const - math.log(self.eps)
        inner = fbar + self.log_Z_hat
        return np.where(G == 0.0, inner, (1.0 - G) * inner + G * tail)

    def _value(self, x):
        x2 = np.atleast_2d(x)
        sq = np.sum(x2 * x2, axis=1)
        out = 0.5 * self.tail_curv * sq + self.gamma_const - math.log(self.eps)
        inside = sq < 4.0 * self.R**2
        if np.any(inside):
            fm = np.asarray(self.base.value(x2[inside]), dtype=float)
            out[inside] = self.value_from(fm, sq[inside])
        return float(out[0]) if np.ndim(x) == 1 else out

    def _inside_parts(self, xi, want_hess=False):
        fm = np.atleast_1d(np.asarray(self.base.value(xi), dtype=float))
        gm = np.atleast_2d(self.base.grad(xi))
        sq = np.sum(xi * xi, axis=1)
        z, g, fbar = self._cap(fm)
        d1 = np.asarray(numkit.mollify_d1(z))
        scale = g + z * d1
        inner = fbar + self.log_Z_hat
        grad_inner = scale[:, None] * gm
        zb = self._blend(sq)
        G = np.asarray(numkit.mollify(zb))
        dG = (np.asarray(numkit.mollify_d1(zb)) * 2.0 / (3.0 * self.R**2))[:, None] * xi
        tail = 0.5 * self.tail_curv * sq + self.gamma_const - math.log(self.eps)
        grad_tail = self.tail_curv * xi
        grad = (1.0 - G)[:, None] * grad_inner + G[:, None] * grad_tail + (tail - inner)[:, None] * dG
        if not want_hess:
            return grad
        d = xi.shape[1]
        eye = np.eye(d)
        delta = self.h2 - self.h1
        hm = np.asarray(self.base.hess(xi)).reshape(-1, d, d)
        d2 = np.asarray(numkit.mollify_d2(z))
        hess_inner = scale[:, None, None] * hm - ((2.0 * d1 + z * d2) / delta)[:, None, None] * _outer(gm, gm)
        w = 3.0 * self.R**2
        hG = ((np.asarray(numkit.mollify_d2(zb)) * 4.0 / w**2)[:, None, None] * _outer(xi, xi)
              + (np.asarray(numkit.mollify_d1(zb)) * 2.0 / w)[:, None, None] * eye)
        diff = grad_tail - grad_inner
        return ((1.0 - G)[:, None, None] * hess_inner + G[:, None, None] * self.tail_curv * eye
                + _outer(dG, diff) + _outer(diff, dG) + (tail - inner)[:, None, None] * hG)

    def _grad(self, x):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.tail_curv * x2
        inside = np.sum(x2 * x2, axis=1) < 4.0 * self.R**2
        if np.any(inside):
            out[inside] = self._inside_parts(x2[inside])
        return out[0] if np.ndim(x) == 1 else out

    def _hess(self, x):
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        d = x2.shape[1]
        out = np.broadcast_to(self.tail_curv * np.eye(d), (x2.shape[0], d, d)).copy()
        inside = np.sum(x2 * x2, axis=1) < 4.0 * self.R**2
        if np.any(inside):
            out[inside] = self._inside_parts(x2[inside], want_hess=True)
        return out[0] if np.ndim(x) == 1 else out

    def smoothness_bound_at(self, x):
        """Pointwise upper bound on ||Hess f_pi(x)|| assuming ``f`` is L-smooth.

        Uses only the value and gradient of ``f`` at ``x``.
        """
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        sq = np.sum(x2 * x2, axis=1)
        out = np.full(x2.shape[0], self.tail_curv)
        inside = sq < 4.0 * self.R**2
        if not np.any(inside):
            return out
        xi = x2[inside]
        fm = np.atleast_1d(np.asarray(self.base.value(xi), dtype=float))
        gm = np.atleast_2d(self.base.grad(xi))
        z, g, fbar = self._cap(fm)
        d1 = np.asarray(numkit.mollify_d1(z))
        d2 = np.asarray(numkit.mollify_d2(z))
        delta = self.h2 - self.h1
        gn2 = np.sum(gm * gm, axis=1)
        inner_curv = np.abs(g + z * d1) * self.L + np.abs(2.0 * d1 + z * d2) * gn2 / delta
        sqi = sq[inside]
        zb = self._blend(sqi)
        G = np.asarray(numkit.mollify(zb))
        w = 3.0 * self.R**2
        dG = np.abs(np.asarray(numkit.mollify_d1(zb))) * 2.0 * np.sqrt(sqi) / w
        hG = (np.abs(np.asarray(numkit.mollify_d2(zb))) * 4.0 * sqi / w**2
              + np.abs(np.asarray(numkit.mollify_d1(zb))) * 2.0 / w)
        inner = fbar + self.log_Z_hat
        tail = 0.5 * self.tail_curv * sqi + self.gamma_const - math.log(self.eps)
        grad_inner = (g + z * d1)[:, None] * gm
        diff = np.linalg.norm(self.tail_curv * xi - grad_inner, axis=1)
        out[inside] = ((1.0 - G) * inner_curv + G * self.tail_curv
                       + 2.0 * dG * diff + hG * np.abs(tail - inner))
        return out


def build_truncated(oracle, est, L, M, eps):
    return TruncatedPotential(oracle, est, L, M, eps)


def ray_points(d, radius, n_dirs, n_radii, seed=0):
    """Points on ``n_dirs`` rays from the origin, ``n_radii`` per ray."""
    if d == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        rng = generator(seed, "rays")
        dirs = rng.standard_normal((n_dirs, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.linspace(0.0, radius, n_radii + 1)[1:]
    return (dirs[:, None, :] * radii[None, :, None]).reshape(-1, d)


def estimate_smoothness(trunc, n_dirs=None, n_radii=2048, seed=0):
    """Numeric estimate of the smoothness of ``f_pi`` from dense ray scans.

    The worst-case analytic bound is far too loose to set a step size; this
    takes the maximum of the pointwise bound along rays through B_2R.
    """
    d = trunc.dim
    n_dirs = 8 * d if n_dirs is None else n_dirs
    pts = ray_points(d, 2.0 * trunc.R, n_dirs, n_radii, seed)
    bound = trunc.smoothness_bound_at(pts)
    return max(float(trunc.L), float(bound.max()))


def initial_kl_bound(L_pi, gap, m, d):
    """Bound 2 + L + (f(0) - min f) + (d/2) log(4 m^2 L) on the initial KL."""
    return 2.0 + L_pi + gap + 0.5 * d * math.log(max(4.0 * m * m * L_pi, 1e-300))


def trunc_min_on_grid(trunc):
    """min f_pi over the recorded per-shell grid minima (no new queries)."""
    rm = trunc.grid.radial_min
    ok = np.isfinite(rm)
    vals = trunc.value_from(rm[ok], trunc.grid.radial_norm[ok] ** 2)
    return float(vals.min())


def moment_and_log_z(trunc, n=4000, seed=0):
    """First moment and log normalizer of exp(-f_pi) by importance sampling
    from the wide Gaussian."""
    d = trunc.dim
    rng = generator(seed, "trunc_moment")
    sigma = math.sqrt(1.0 / trunc.tail_curv)
    y = sigma * rng.standard_normal((n, d))
    logw = trunc.f_gamma(y) - np.asarray(trunc.value(y))
    log_z = numkit.log_sum_exp(logw) - math.log(n)
    w = np.exp(logw - logw.max())
    w /= w.sum()
    m = float(np.sum(w * np.linalg.norm(y, axis=1)))
    return m, log_z


def estimate_K0(trunc, L_pi, M=None, m=None, seed=0):
    """Initial-KL bound for the Gaussian start N(0, I/(2 L_pi)).

    ``f_pi(0)`` costs one value query, the minimum reuses grid data, and the
    first moment ``m`` is estimated by importance sampling unless given.
    """
    if m is None:
        m, _ = moment_and_log_z(trunc, seed=seed)
    f0 = float(trunc.value(np.zeros(trunc.dim)))
    gap = max(0.0, f0 - min(trunc_min_on_grid(trunc), f0))
    return initial_kl_bound(L_pi, gap, m, trunc.dim)


def theorem_steps(L_pi, K0, d, eps, alpha):
    """Step count max(32^2 L^2 d K0 / (alpha^2 delta^4), 9 K0 / d) with delta = eps/2."""
    delta = 0.5 * eps
    return max(32.0**2 * L_pi**2 * d * K0 / (alpha**2 * delta**4), 9.0 * K0 / d)


def auto_step(K0, L_pi, d, N):
    return math.sqrt(K0) / (2.0 * L_pi * math.sqrt(d * N))


@dataclass
class LmcConfig:
    N: int
    h: float
    K0: float
    L_pi: float
    seed: int = 0
    n_samples: int = 1000
    threads: int = 1
    block: int = 8192
    blowup_radius: float = 1e12

    def __post_init__(self):
        if self.N < 1 or not self.h > 0:
            raise DomainError("LMC needs N >= 1 and h > 0")
        if not self.L_pi > 0:
            raise DomainError("L_pi must be positive")
        if self.n_samples < 1:
            raise DomainError("n_samples must be positive")


def _lmc_block(target, cfg, index, size):
    rng = generator(cfg.seed, "lmc", index)
    d = target.dim
    x = rng.standard_normal((size, d)) / math.sqrt(2.0 * cfg.L_pi)
    t0 = rng.uniform(0.0, cfg.N * cfg.h, size)
    k0 = np.minimum(np.floor(t0 / cfg.h).astype(np.int64), cfg.N - 1)
    tau = t0 - k0 * cfg.h
    grads = 0
    root = math.sqrt(2.0 * cfg.h)
    for k in range(int(k0.max())):
        noise = rng.standard_normal((size, d))
        active = k0 > k
        xa = x[active]
        x[active] = xa - cfg.h * np.atleast_2d(target.grad(xa)) + root * noise[active]
        grads += xa.shape[0]
        _guard(x[active], cfg, k + 1)
    noise = rng.standard_normal((size, d))
    x = x - tau[:, None] * np.atleast_2d(target.grad(x)) + np.sqrt(2.0 * tau)[:, None] * noise
    grads += size
    _guard(x, cfg, int(k0.max()) + 1)
    return x, grads


def _guard(x, cfg, step):
    if x.size and (not np.all(np.isfinite(x)) or np.max(np.abs(x)) > cfg.blowup_radius):
        raise DivergenceError(f"Langevin chain diverged at step {step}", step=step)


def lmc_run(target, config):
    """Averaged Langevin samples from exp(-f) for ``target``.

    Each sample starts from N(0, I/(2 L_pi)), runs ``floor(t0/h)`` Euler steps
    for t0 uniform on [0, N h] and finishes with an exact partial step.
    Returns ``(samples, ledger)`` where the ledger counts gradient evaluations
    of ``target``.
    """
    cfg = config
    sizes = []
    left = cfg.n_samples
    while left > 0:
        sizes.append(min(cfg.block, left))
        left -= sizes[-1]

    def work(i):
        return _lmc_block(target, cfg, i, sizes[i])

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(work, range(len(sizes))))
    else:
        results = [work(i) for i in range(len(sizes))]
    samples = np.vstack([r[0] for r in results])
    ledger = QueryLedger(0, sum(r[1] for r in results))
    return samples, ledger


@dataclass
class SamplerReport:
    f_hat_star: float
    log_Z_hat: float
    h1: float
    h2: float
    L_pi: float
    K0: float
    N: int
    h: float
    queries: dict
    samples_path: str = None
    N_theorem: float = None
    alpha: float = None
    cubes_visited: int = None
    ell: float = None
    R: float = None
    first_moment: float = None
    log_Z_pi: float = None
    tv_estimate: float = None

    def as_dict(self):
        return asdict(self)


def sample_nonlogconcave(oracle, L, M, eps, n_samples, overrides=None, seed=0,
                         budget=DEFAULT_CUBE_BUDGET, threads=1, max_steps=DEFAULT_MAX_STEPS):
    """Full pipeline: grid estimates, truncation, K0, step rule, Langevin.

    ``overrides`` may set ``N``, ``h``, ``L_pi`` or ``alpha``. Without an
    ``alpha`` the Poincare constant is the numeric comparison bound; without
    ``N`` the theorem's step count is used, capped at ``max_steps``.
    Returns ``(samples, report)``.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - {"N", "h", "L_pi", "alpha"}
    if unknown:
        raise DomainError(f"unknown overrides {sorted(unknown)}")
    d = oracle.dim
    ledger = QueryLedger()
    mu = counted(oracle, ledger)
    est = estimate_grid(mu, L, M, eps, d, budget=budget, threads=threads)
    trunc = build_truncated(mu, est, L, M, eps)
    L_pi = overrides.get("L_pi") or estimate_smoothness(trunc, seed=seed)
    m, log_z_pi = moment_and_log_z(trunc, seed=seed)
    K0 = estimate_K0(trunc, L_pi, M, m=m, seed=seed)
    alpha = overrides.get("alpha")
    if alpha is None:
        probes = ray_points(d, 3.0 * trunc.R, 8 * d, 256, seed)
        alpha = metrics.poincare_comparison_bound(trunc, trunc.gamma_oracle(), M, eps, d,
                                                  probes, log_z_pi)
    n_theorem = theorem_steps(L_pi, K0, d, eps, alpha)
    N = int(overrides.get("N") or min(math.ceil(n_theorem), max_steps))
    h = overrides.get("h") or auto_step(K0, L_pi, d, N)
    cfg = LmcConfig(N=N, h=h, K0=K0, L_pi=L_pi, seed=seed, n_samples=n_samples,
                    threads=threads, blowup_radius=1e6 * trunc.R)
    samples, _ = lmc_run(trunc, cfg)
    report = SamplerReport(
        f_hat_star=est.f_hat_star, log_Z_hat=est.log_Z_hat, h1=trunc.h1, h2=trunc.h2,
        L_pi=L_pi, K0=K0, N=N, h=h, queries=ledger.as_dict(), N_theorem=n_theorem,
        alpha=alpha, cubes_visited=est.cubes_visited, ell=est.spec.ell, R=trunc.R,
        first_moment=m, log_Z_pi=log_z_pi)
    return samples, report
