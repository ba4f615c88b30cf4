"""Hard-instance generators.

* The lower-bound family: a base potential with a high plateau ring and
  perturbations that dig a well of depth ``gamma`` into the ring.
* The stitched Gaussian whose log-density is smooth at time zero but whose
  Ornstein-Uhlenbeck evolution is not.
* Cosine-bump optimization instances on a lattice of disjoint balls.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import numkit
from .errors import ConstructionError, ConvergenceError, DomainError, NumericError, PackingError
from .oracle import PotentialOracle
from .rng import stream


@dataclass(frozen=True)
class LowerBoundParams:
    """Parameters (d, L, M, eps) of the lower-bound family and derived radii."""

    d: int
    L: float
    M: float
    eps: float

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.d < 1:
            raise ConstructionError("dimension must satisfy d >= 1")
        if not (self.L > 0 and self.M > 0):
            raise ConstructionError("L and M must be positive")
        if not (0.0 < self.eps < 1.0 / 200.0):
            raise ConstructionError("eps must satisfy 0 < eps < 1/200")
        if self.L * self.M < self.d:
            raise ConstructionError("parameters must satisfy L*M >= d")
        if 4.0 * self.r2 > self.R:
            raise ConstructionError("parameters must satisfy 4*r2 <= R")

    @property
    def R(self):
        return math.sqrt(self.M / self.eps)

    @property
    def r1(self):
        return math.sqrt(self.d / self.L * math.log(self.L * self.M / (self.d * self.eps)))

    @property
    def r2(self):
        return math.sqrt(2.0) * self.r1

    @property
    def h1(self):
        return numkit.log_ball_volume(self.d, 3.0 * self.R) + math.log(1.0 / self.eps)

    def h0(self, x):
        sq = np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
        return self.d * sq / (2.0 * self.M) + 0.5 * self.d * math.log(2.0 * math.pi * self.M / self.d)

    def cap_count_bound(self):
        """Existence bound on the number of disjoint caps (meaningful for d >= 3)."""
        d = self.d
        if d < 3:
            return 0.0
        ratio = 3.0 * self.R / (8.0 * math.sqrt(2.0) * self.r2)
        return (d - 1) * math.sqrt(d - 2) / 2.0 * ratio ** (d - 1)

    def derived(self):
        return {"R": self.R, "r1": self.r1, "r2": self.r2, "h1": self.h1,
                "h0_at_0": float(self.h0(np.zeros(self.d)))}


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _expand(v):
    return np.asarray(v)[..., None]


def _expand2(v):
    return np.asarray(v)[..., None, None]


@dataclass
class BaseInstance:
    params: LowerBoundParams
    potential: PotentialOracle
    inner_shell: numkit.RadialShell
    outer_shell: numkit.RadialShell


def build_base(params):
    """Base potential: h0 near the origin and far away, plateau h1 on R/2..R."""
    if not isinstance(params, LowerBoundParams):
        params = LowerBoundParams(**params)
    d, M, R = params.d, params.M, params.R
    h1 = params.h1
    origin = np.zeros(d)
    inner = numkit.RadialShell(origin, R * R / 16.0, R * R / 4.0)
    outer = numkit.RadialShell(origin, R * R, 4.0 * R * R)
    eye = np.eye(d)

    def parts(x):
        gap = np.asarray(numkit.shell_value(inner, x)) - np.asarray(numkit.shell_value(outer, x))
        return gap, params.h0(x)

    def value(x):
        gap, h0 = parts(x)
        out = gap * h1 + (1.0 - gap) * h0
        return float(out) if np.ndim(x) == 1 else out

    def grad(x):
        gap, h0 = parts(x)
        dgap = numkit.shell_grad(inner, x) - numkit.shell_grad(outer, x)
        dh0 = d * np.asarray(x, dtype=float) / M
        return dgap * _expand(h1 - h0) + _expand(1.0 - gap) * dh0

    def hess(x):
        gap, h0 = parts(x)
        dgap = numkit.shell_grad(inner, x) - numkit.shell_grad(outer, x)
        hgap = numkit.shell_hess(inner, x) - numkit.shell_hess(outer, x)
        dh0 = d * np.asarray(x, dtype=float) / M
        return (hgap * _expand2(h1 - h0) - _outer(dgap, dh0) - _outer(dh0, dgap)
                + _expand2(1.0 - gap) * (d / M) * eye)

    meta = {"kind": "lb_base", "params": {"d": d, "L": params.L, "M": M, "eps": params.eps}}
    return BaseInstance(params, PotentialOracle(d, value, grad, hess, meta), inner, outer)


def _excess_log_integral(params, gamma):
    """log of the integral over B_r2(v) of exp(-f_v) - exp(-h1).

    Inside the ball f_v = h1 - gamma * (1 - g(|x - v|)), so the integral is
    radial. After substituting s = |x - v| / r2 and factoring out exp(gamma),
    the integrand exp(-gamma g) - exp(-gamma) lies in [0, 1].
    """
    d = params.d
    rho_sq = 0.5  # (r1 / r2)^2
    core = -math.expm1(-gamma) * rho_sq ** (0.5 * d) / d

    def integrand(s):
        g = numkit.mollify((s * s - rho_sq) / (1.0 - rho_sq))
        return math.exp(-gamma * g) * -math.expm1(-gamma * (1.0 - g)) * s ** (d - 1)

    ring, _ = integrate.quad(integrand, math.sqrt(rho_sq), 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
    total = core + ring
    return (-params.h1 + numkit.log_sphere_area(d) + d * math.log(params.r2)
            + gamma + math.log(total))


def excess_mass(params, gamma):
    """Integral over B_r2(v) of exp(-f_v) - exp(-h1) for depth ``gamma``."""
    return math.exp(_excess_log_integral(params, gamma))


def gamma_bracket(params):
    """log of the bracket 9 (3R/r2)^d <= e^gamma <= 18 (3R/r1)^d."""
    d, R = params.d, params.R
    return (math.log(9.0) + d * math.log(3.0 * R / params.r2),
            math.log(18.0) + d * math.log(3.0 * R / params.r1))


def solve_gamma(base, v=None, tol=1e-6, max_iter=400):
    """Depth gamma whose well carries excess mass 9*eps, by bisection."""
    params = base.params if isinstance(base, BaseInstance) else base
    if v is not None:
        _check_cap_center(params, v)
    target = math.log(9.0 * params.eps)

    def residual(g):
        return _excess_log_integral(params, g) - target

    lo, hi = gamma_bracket(params)
    lo = max(lo, 1e-12)
    for _ in range(60):
        if residual(lo) <= 0.0:
            break
        lo *= 0.5
    else:
        raise NumericError("could not find a lower bracket for gamma")
    for _ in range(60):
        if residual(hi) >= 0.0:
            break
        hi *= 2.0
    else:
        raise NumericError("could not find an upper bracket for gamma")
    mid = 0.5 * (lo + hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        r = residual(mid)
        if abs(math.expm1(r)) <= tol:
            return mid
        if r < 0.0:
            lo = mid
        else:
            hi = mid
    raise ConvergenceError("gamma bisection did not converge", estimate=mid)


def _check_cap_center(params, v):
    v = np.asarray(v, dtype=float)
    if v.shape != (params.d,):
        raise DomainError("cap center has the wrong dimension")
    if abs(np.linalg.norm(v) - 0.75 * params.R) > 1e-9 * params.R:
        raise DomainError("cap center must have norm 3R/4")
    return v


@dataclass
class PerturbedInstance:
    base: BaseInstance
    v: np.ndarray
    gamma: float
    potential: PotentialOracle
    shell: numkit.RadialShell

    @property
    def h2(self):
        return self.base.params.h1 - self.gamma


def build_perturbed(base, v, gamma):
    """Perturbed potential ``g_v f0 + (1 - g_v) h2`` with ``h2 = h1 - gamma``."""
    params = base.params
    v = _check_cap_center(params, v)
    if not gamma > 0:
        raise DomainError("gamma must be positive")
    h2 = params.h1 - gamma
    shell = numkit.RadialShell(v, params.r1**2, params.r2**2)
    f0 = base.potential

    def value(x):
        g = np.asarray(numkit.shell_value(shell, x))
        out = g * np.asarray(f0.value(x)) + (1.0 - g) * h2
        return float(out) if np.ndim(x) == 1 else out

    def grad(x):
        g = np.asarray(numkit.shell_value(shell, x))
        dg = numkit.shell_grad(shell, x)
        return dg * _expand(np.asarray(f0.value(x)) - h2) + _expand(g) * f0.grad(x)

    def hess(x):
        g = np.asarray(numkit.shell_value(shell, x))
        dg = numkit.shell_grad(shell, x)
        df = f0.grad(x)
        return (numkit.shell_hess(shell, x) * _expand2(np.asarray(f0.value(x)) - h2)
                + _outer(dg, df) + _outer(df, dg) + _expand2(g) * f0.hess(x))

    meta = {"kind": "lb_perturbed",
            "params": dict(base.potential.meta["params"], v=v.tolist(), gamma=gamma)}
    oracle = PotentialOracle(params.d, value, grad, hess, meta)
    return PerturbedInstance(base, v, gamma, oracle, shell)


def pack_caps(params, want, seed=0, max_attempts=20000):
    """Greedy random packing of cap centers on the sphere of radius 3R/4.

    A candidate is kept when its distance to every kept center exceeds 2*r2.
    """
    if want < 1:
        raise DomainError("want must be at least 1")
    rng = np.random.default_rng(stream(seed, "pack_caps"))
    radius = 0.75 * params.R
    min_dist = 2.0 * params.r2
    kept = []
    for _ in range(max_attempts):
        if len(kept) >= want:
            break
        z = rng.standard_normal(params.d)
        z *= radius / np.linalg.norm(z)
        if all(np.linalg.norm(z - c) > min_dist for c in kept):
            kept.append(z)
    if want >= 2 and len(kept) < 2:
        raise PackingError("could not place two disjoint caps")
    return np.array(kept)


def build_stitched(u):
    """Standard Gaussian glued to a unit Gaussian centered at ``u``.

    Inside the ball of radius 0.4|u| around ``u`` the potential is |x-u|^2/2,
    outside radius 0.5|u| it is |x|^2/2.
    """
    u = np.asarray(u, dtype=float).ravel()
    d = u.size
    norm_u = float(np.linalg.norm(u))
    if norm_u**2 < 100.0 * d:
        raise DomainError("stitched instance needs |u|^2 >= 100 d")
    shell = numkit.RadialShell(u, 0.4 * norm_u, 0.5 * norm_u, numkit.LINEAR)
    eye = np.eye(d)

    def value(x):
        x = np.asarray(x)
        g = np.asarray(numkit.shell_value(shell, x))
        out = 0.5 * (g * np.sum(x * x, axis=-1) + (1.0 - g) * np.sum((x - u) ** 2, axis=-1))
        return float(out) if x.ndim == 1 else out

    def grad(x):
        x = np.asarray(x)
        g = np.asarray(numkit.shell_value(shell, x))
        mix = x @ u - 0.5 * norm_u**2
        return x - _expand(1.0 - g) * u + _expand(mix) * numkit.shell_grad(shell, x)

    def hess(x):
        x = np.asarray(x)
        dg = numkit.shell_grad(shell, x)
        mix = x @ u - 0.5 * norm_u**2
        uu = np.broadcast_to(u, dg.shape)
        return eye + _outer(uu, dg) + _outer(dg, uu) + _expand2(mix) * numkit.shell_hess(shell, x)

    meta = {"kind": "stitched", "params": {"u": u.tolist()}}
    return PotentialOracle(d, value, grad, hess, meta)


def bump_radius(L, eps):
    return math.sqrt((2.0 * math.pi**2 + math.pi) * eps / L)


@dataclass
class OptInstance:
    center: np.ndarray
    L: float
    m: float
    R: float
    eps: float
    potential: PotentialOracle

    @property
    def r(self):
        return bump_radius(self.L, self.eps)


def build_opt_instance(center, L, m, R, eps):
    """Flat potential on B_{R/2} with a cosine well of depth eps at ``center``
    and quadratic growth m(|x| - R/2)^2 outside."""
    center = np.asarray(center, dtype=float).ravel()
    d = center.size
    if not (L > 0 and m > 0 and R > 0 and eps > 0):
        raise DomainError("opt instance parameters must be positive")
    if L < 2.0 * m:
        raise DomainError("opt instance needs L >= 2m")
    if eps >= L * R * R:
        raise DomainError("opt instance needs eps < L R^2")
    r = bump_radius(L, eps)
    half = 0.5 * R
    if r >= half or np.linalg.norm(center) > half - r + 1e-12:
        raise DomainError("bump ball must lie inside B_{R/2}")
    eye = np.eye(d)
    k = math.pi / r**2

    def regions(x):
        x = np.asarray(x, dtype=float)
        y = x - center
        rho_sq = np.sum(y * y, axis=-1)
        nx = np.sqrt(np.sum(x * x, axis=-1))
        return x, y, rho_sq, nx, rho_sq <= r * r, nx > half

    def value(x):
        x, y, rho_sq, nx, bump, out = regions(x)
        vals = np.where(bump, 0.5 * eps * np.cos(k * (rho_sq - r * r)) - 0.5 * eps, 0.0)
        vals = np.where(out, m * (nx - half) ** 2, vals)
        return float(vals) if x.ndim == 1 else vals

    def grad(x):
        x, y, rho_sq, nx, bump, out = regions(x)
        phase = k * (rho_sq - r * r)
        g_bump = _expand(-eps * k * np.sin(phase)) * y
        safe = np.where(out, nx, 1.0)
        g_out = _expand(2.0 * m * (nx - half) / safe) * x
        return (_expand(bump) * g_bump + _expand(out) * g_out)

    def hess(x):
        x, y, rho_sq, nx, bump, out = regions(x)
        phase = k * (rho_sq - r * r)
        h_bump = -eps * k * (_expand2(np.sin(phase)) * eye
                             + _expand2(2.0 * k * np.cos(phase)) * _outer(y, y))
        safe = np.where(out, nx, 1.0)
        xhat = x / _expand(safe)
        radial = _outer(xhat, xhat)
        h_out = 2.0 * m * (_expand2(1.0 - half / safe) * (eye - radial) + radial)
        return _expand2(bump) * h_bump + _expand2(out) * h_out

    meta = {"kind": "opt", "params": {"center": center.tolist(), "L": L, "m": m, "R": R, "eps": eps}}
    oracle = PotentialOracle(d, value, grad, hess, meta)
    return OptInstance(center, L, m, R, eps, oracle)


def _lattice_in_ball(d, k_max, limit):
    """Integer points with |k|^2 <= limit and |k_i| <= k_max, in lexicographic order."""
    out = []

    def rec(prefix, used):
        if len(prefix) == d:
            out.append(list(prefix))
            return
        for k in range(-k_max, k_max + 1):
            if used + k * k <= limit:
                prefix.append(k)
                rec(prefix, used + k * k)
                prefix.pop()

    rec([], 0)
    return np.array(out, dtype=float).reshape(-1, d)


def pack_opt_centers(R, r, d):
    """Centers on the lattice of pitch 2r inside B_{R/2 - r}; balls B_r(c) have disjoint interiors."""
    reach = 0.5 * R - r
    if reach < 0:
        raise DomainError("bump radius too large for the ball")
    pitch = 2.0 * r
    k_max = int(math.floor(reach / pitch))
    pts = pitch * _lattice_in_ball(d, k_max, (reach / pitch) ** 2 + 1e-9)
    keep = np.linalg.norm(pts, axis=1) <= reach
    return pts[keep]
