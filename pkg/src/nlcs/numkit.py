"""Numerical building blocks: the quintic mollifier, radial shells, ball
volumes, log-domain sums, finite differences and a symmetric operator norm.

Every point-wise function accepts either a single point of shape ``(d,)`` or a
batch of shape ``(n, d)`` and returns a matching scalar / array.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DomainError, EvaluationError

QUADRATIC = "quadratic"
LINEAR = "linear"


def _check_finite(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise DomainError("mollifier argument must be finite")
    return z


def _scalar_or_array(out, like):
    return float(out) if np.ndim(like) == 0 else out


def mollify(z):
    """Smooth step q(z) = 6z^5 - 15z^4 + 10z^3 clamped to [0, 1]."""
    z = _check_finite(z)
    c = np.clip(z, 0.0, 1.0)
    out = c * c * c * (c * (6.0 * c - 15.0) + 10.0)
    return _scalar_or_array(out, z)


def mollify_d1(z):
    """First derivative of :func:`mollify`; zero outside (0, 1)."""
    z = _check_finite(z)
    inside = (z > 0.0) & (z < 1.0)
    c = np.where(inside, z, 0.0)
    out = np.where(inside, 30.0 * c * c * (c - 1.0) ** 2, 0.0)
    return _scalar_or_array(out, z)


def mollify_d2(z):
    """Second derivative of :func:`mollify`; zero outside (0, 1)."""
    z = _check_finite(z)
    inside = (z > 0.0) & (z < 1.0)
    c = np.where(inside, z, 0.0)
    out = np.where(inside, 60.0 * c * (c - 1.0) * (2.0 * c - 1.0), 0.0)
    return _scalar_or_array(out, z)


@dataclass(frozen=True)
class RadialShell:
    """Mollified indicator of the outside of a ball.

    In quadratic mode the argument is ``(|x-c|^2 - inner) / (outer - inner)``
    so ``inner`` and ``outer`` are squared radii. In linear mode the argument is
    ``(|x-c| - inner) / (outer - inner)`` with plain radii.
    """

    center: np.ndarray
    inner: float
    outer: float
    mode: str = QUADRATIC

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.mode not in (QUADRATIC, LINEAR):
            raise DomainError(f"unknown shell mode {self.mode!r}")
        if not (self.inner >= 0.0 and self.outer > self.inner):
            raise DomainError("shell needs 0 <= inner < outer")

    @property
    def width(self):
        return self.outer - self.inner


def _shell_parts(shell, x):
    x = np.asarray(x, dtype=float)
    y = x - shell.center
    sq = np.sum(y * y, axis=-1)
    if shell.mode == QUADRATIC:
        z = (sq - shell.inner) / shell.width
    else:
        z = (np.sqrt(sq) - shell.inner) / shell.width
    return x, y, sq, z


def shell_value(shell, x):
    """Value of the shell function at ``x``."""
    _, _, _, z = _shell_parts(shell, x)
    return mollify(z)


def shell_grad(shell, x):
    """Gradient of the shell function."""
    x, y, sq, z = _shell_parts(shell, x)
    d1 = np.asarray(mollify_d1(z))
    w = shell.width
    if shell.mode == QUADRATIC:
        return (2.0 * d1 / w)[..., None] * y
    s = np.sqrt(sq)
    _check_center(shell, s)
    safe = np.where(s > 0.0, s, 1.0)
    return (d1 / (w * safe))[..., None] * y


def shell_hess(shell, x):
    """Hessian of the shell function, shape ``(d, d)`` or ``(n, d, d)``."""
    x, y, sq, z = _shell_parts(shell, x)
    d1 = np.asarray(mollify_d1(z))
    d2 = np.asarray(mollify_d2(z))
    w = shell.width
    eye = np.eye(x.shape[-1])
    outer = y[..., :, None] * y[..., None, :]
    if shell.mode == QUADRATIC:
        return (4.0 * d2 / w**2)[..., None, None] * outer + (2.0 * d1 / w)[..., None, None] * eye
    s = np.sqrt(sq)
    _check_center(shell, s)
    safe = np.where(s > 0.0, s, 1.0)
    radial = (d2 / (w**2 * safe**2))[..., None, None] * outer
    tangential = (d1 / (w * safe))[..., None, None] * (eye - outer / (safe**2)[..., None, None])
    return radial + tangential


def _check_center(shell, s):
    if shell.inner == 0.0 and np.any(s == 0.0):
        raise DomainError("linear shell derivative is singular at its center")


def log_ball_volume(d, R):
    """log vol(B_R) in R^d."""
    if d <= 0 or not R > 0:
        raise DomainError("log_ball_volume needs d >= 1 and R > 0")
    return 0.5 * d * math.log(math.pi) + d * math.log(R) - math.lgamma(0.5 * d + 1.0)


def log_sphere_area(d):
    """log of the surface area of the unit sphere in R^d, i.e. d * vol(B_1)."""
    return math.log(d) + log_ball_volume(d, 1.0)


def log_sum_exp(vals):
    """Stable log(sum(exp(vals))); ``-inf`` entries are allowed."""
    v = np.asarray(vals, dtype=float).ravel()
    if v.size == 0:
        raise DomainError("log_sum_exp of an empty sequence")
    top = np.max(v)
    if top == -np.inf:
        return -math.inf
    return float(top + math.log(np.sum(np.exp(v - top))))


def default_step(x):
    return 1e-4 * (1.0 + float(np.linalg.norm(x)))


def _eval(f, x):
    val = float(f(x))
    if not math.isfinite(val):
        raise EvaluationError(f"non-finite evaluation at {x.tolist()}")
    return val


def fd_gradient(f, x, step=None):
    """Central-difference gradient of a scalar field."""
    x = np.asarray(x, dtype=float)
    h = default_step(x) if step is None else step
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (_eval(f, x + e) - _eval(f, x - e)) / (2.0 * h)
    return g


def fd_hessian(f, x, step=None):
    """Second-order central-difference Hessian of a scalar field."""
    x = np.asarray(x, dtype=float)
    h = default_step(x) if step is None else step
    d = x.size
    f0 = _eval(f, x)
    H = np.empty((d, d))
    basis = np.eye(d) * h
    for i in range(d):
        H[i, i] = (_eval(f, x + basis[i]) - 2.0 * f0 + _eval(f, x - basis[i])) / h**2
        for j in range(i):
            pp = _eval(f, x + basis[i] + basis[j])
            pm = _eval(f, x + basis[i] - basis[j])
            mp = _eval(f, x - basis[i] + basis[j])
            mm = _eval(f, x - basis[i] - basis[j])
            H[i, j] = H[j, i] = (pp - pm - mp + mm) / (4.0 * h**2)
    return H


def fd_jacobian(grad, x, step=None):
    """Symmetrized central-difference Jacobian of a gradient field.

    More accurate than :func:`fd_hessian` when an exact gradient is available.
    """
    x = np.asarray(x, dtype=float)
    h = default_step(x) if step is None else step
    d = x.size
    J = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        J[:, i] = (np.asarray(grad(x + e)) - np.asarray(grad(x - e))) / (2.0 * h)
    if not np.all(np.isfinite(J)):
        raise EvaluationError(f"non-finite Hessian entry at {x.tolist()}")
    return 0.5 * (J + J.T)


def _power_top(B, P, start, tol, max_iter, scale):
    # iterate with P (a power of B) but report the Rayleigh quotient of B
    v = start / np.linalg.norm(start)
    rho = float(v @ B @ v)
    for _ in range(max_iter):
        w = P @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return float(v @ B @ v), v, True
        v = w / nw
        new = float(v @ B @ v)
        if abs(new - rho) <= tol * max(abs(new), scale):
            return new, v, True
        rho = new
    return rho, v, False


def _matrix_power(B, max_squarings=60):
    """Repeatedly squared and rescaled copy of the PSD matrix B.

    Squaring stops once the result is numerically rank one (trace equal to
    Frobenius norm), which separates even very close top eigenvalues.
    """
    P = B
    for _ in range(max_squarings):
        norm = np.linalg.norm(P)
        if norm == 0.0 or not np.isfinite(norm):
            break
        P = P / norm
        if np.trace(P) - 1.0 <= 1e-14:
            break
        P = P @ P
    return P if np.all(np.isfinite(P)) and np.linalg.norm(P) > 0 else B


def _top_eigenvalue(B, tol, max_iter, scale):
    d = B.shape[0]
    P = _matrix_power(B)
    first, v1, ok1 = _power_top(B, P, np.ones(d), tol, max_iter, scale)
    if d == 1:
        return first, ok1
    # restart orthogonal to the first answer in case the all-ones start
    # missed the dominant eigenvector
    alt = np.cos(np.arange(d) * 1.3 + 0.7)
    alt = alt - (alt @ v1) * v1
    if np.linalg.norm(alt) < 1e-12:
        return first, ok1
    second, _, ok2 = _power_top(B, P, alt, tol, max_iter, scale)
    if second > first:
        return second, ok2
    return first, ok1


def opnorm_sym(H, tol=1e-10, max_iter=20000):
    """Spectral norm of a symmetric matrix by shifted power iteration.

    Both ends of the spectrum are found as top eigenvalues of the PSD
    matrices ``H + sI`` and ``sI - H`` where ``s`` is the Gershgorin radius.
    """
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise DomainError("opnorm_sym needs a square matrix")
    if not np.all(np.isfinite(H)):
        raise DomainError("opnorm_sym needs finite entries")
    H = 0.5 * (H + H.T)
    shift = float(np.max(np.sum(np.abs(H), axis=1)))
    if shift == 0.0:
        return 0.0
    eye = np.eye(H.shape[0])
    # tolerance is relative to the spectral scale so that a shifted matrix
    # that is zero up to rounding still counts as converged
    top, ok_top = _top_eigenvalue(H + shift * eye, tol, max_iter, shift)
    bottom, ok_bottom = _top_eigenvalue(shift * eye - H, tol, max_iter, shift)
    estimate = max(top - shift, bottom - shift, 0.0)
    if not (ok_top and ok_bottom):
        raise ConvergenceError("power iteration did not converge", estimate=estimate)
    return estimate
