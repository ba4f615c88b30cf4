import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from constants import BASE_SMOOTHNESS_C, PERTURBED_SMOOTHNESS_C, STITCHED_T0_BOUND
from nlcs import instances, metrics, numkit
from nlcs.errors import ConstructionError, DomainError

P2 = instances.LowerBoundParams(2, 8.0, 1.0, 0.004)


@pytest.fixture(scope="module")
def base2():
    return instances.build_base(P2)


@pytest.fixture(scope="module")
def perturbed2(base2):
    v = instances.pack_caps(P2, 1, seed=3)[0]
    gamma = instances.solve_gamma(base2, v)
    return instances.build_perturbed(base2, v, gamma)


def sphere_points(d, radius, n, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d))
    return radius * z / np.linalg.norm(z, axis=1, keepdims=True)


def check_gradient(f, points, rtol=1e-4):
    for x in points:
        g = f.grad(x)
        # fine step: the shells are narrow compared with the default step
        g_fd = numkit.fd_gradient(f.value, x, step=1e-6 * (1.0 + np.linalg.norm(x)))
        assert np.allclose(g, g_fd, rtol=rtol, atol=rtol * (1.0 + np.abs(g).max())), x


def quad_grid(params, d):
    return metrics.QuadratureGrid([(-3.0 * params.R, 3.0 * params.R)] * d, 2001 if d == 2 else 20001)


def log_mass(f, grid):
    nodes, logw = grid.nodes_and_log_weights()
    return float(logsumexp(-np.asarray(f.value(nodes)) + logw))


def test_params_validation():
    with pytest.raises(ConstructionError, match="1/200"):
        instances.LowerBoundParams(2, 8.0, 1.0, 0.5)
    with pytest.raises(ConstructionError, match="L\\*M >= d"):
        instances.LowerBoundParams(5, 1.0, 1.0, 0.004)
    with pytest.raises(ConstructionError):
        instances.LowerBoundParams(0, 1.0, 1.0, 0.004)
    p = P2
    assert p.R == pytest.approx(math.sqrt(1.0 / 0.004))
    assert p.r2 == pytest.approx(math.sqrt(2) * p.r1)
    assert 4 * p.r2 <= p.R


def test_base_reference_values(base2):
    f = base2.potential
    assert f.value(np.zeros(2)) == pytest.approx(math.log(2 * math.pi * 1.0 / 2), abs=1e-12)
    for x in sphere_points(2, 0.75 * P2.R, 20, 0):
        assert f.value(x) == P2.h1
    plateau = np.vstack([sphere_points(2, r * P2.R, 10, 1) for r in (0.51, 0.6, 0.9, 0.99)])
    assert np.all(np.asarray(f.value(plateau)) == P2.h1)
    edges = np.vstack([sphere_points(2, r * P2.R, 10, 1) for r in (0.5, 1.0)])
    assert np.allclose(f.value(edges), P2.h1, rtol=1e-12)
    far = sphere_points(2, 2.5 * P2.R, 10, 2)
    assert np.allclose(f.value(far), P2.h0(far))


def test_base_gradient_matches_fd(base2):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2.5 * P2.R, 2.5 * P2.R, (100, 2))
    check_gradient(base2.potential, pts)


def test_base_is_continuous_across_shells(base2):
    f = base2.potential
    for r in (P2.R / 4, P2.R / 2, P2.R, 2 * P2.R):
        x = sphere_points(2, r, 5, 3)
        assert np.allclose(f.value(x * (1 - 1e-9)), f.value(x * (1 + 1e-9)), atol=1e-6)


@pytest.mark.parametrize("params", [instances.LowerBoundParams(1, 4.0, 1.0, 0.004), P2,
                                    instances.LowerBoundParams(5, 8.0, 2.0, 0.004)])
def test_base_smoothness(params):
    f = instances.build_base(params).potential
    d = params.d
    shells = np.vstack([sphere_points(d, r, 100, 4) for r in (params.R / 4, params.R / 2, params.R, 2 * params.R)])
    c = metrics.smoothness_probe(f, (np.zeros(d), 3 * params.R), 1000, points=shells)
    assert c <= BASE_SMOOTHNESS_C * params.L
    fd = metrics.smoothness_probe(f, points=shells[::20], finite_difference=True)
    assert fd <= BASE_SMOOTHNESS_C * params.L * (1 + 1e-4)


@pytest.mark.parametrize("params", [instances.LowerBoundParams(1, 4.0, 1.0, 0.004), P2])
def test_base_mass_and_moment(params):
    d = params.d
    grid = quad_grid(params, d)
    f = instances.build_base(params).potential
    z0 = math.exp(log_mass(f, grid))
    assert 1 - 16 * params.eps - 1e-4 <= z0 <= 1 + params.eps + 1e-4
    m2, _ = metrics.second_moment(f, grid=grid)
    assert m2 <= 6 * params.M


def test_gamma_solution_and_monotonicity(base2):
    gamma = instances.solve_gamma(base2)
    target = 9 * P2.eps
    assert instances.excess_mass(P2, gamma) == pytest.approx(target, rel=1e-6)
    assert instances.excess_mass(P2, gamma / 2) < target < instances.excess_mass(P2, 2 * gamma)
    lo, hi = instances.gamma_bracket(P2)
    assert lo <= gamma <= hi


@given(st.floats(0.5, 30.0))
def test_excess_mass_increasing(g):
    assert instances.excess_mass(P2, g) < instances.excess_mass(P2, g + 0.25)


def test_gamma_integral_against_planar_quadrature(perturbed2):
    # brute-force 2-d integral over the cap compared with the radial formula
    v, r2 = perturbed2.v, P2.r2
    n = 801
    ax = np.linspace(-r2, r2, n)
    X, Y = np.meshgrid(ax, ax, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()]) + v
    inside = np.sum((pts - v) ** 2, axis=1) <= r2**2
    vals = np.exp(-np.asarray(perturbed2.potential.value(pts))) - math.exp(-P2.h1)
    integral = float(np.sum(vals[inside])) * (ax[1] - ax[0]) ** 2
    assert integral == pytest.approx(9 * P2.eps, rel=2e-2)


def test_perturbed_reference_values(base2, perturbed2):
    f = perturbed2.potential
    v, gamma = perturbed2.v, perturbed2.gamma
    assert f.value(v) == pytest.approx(P2.h1 - gamma, abs=1e-12)
    assert perturbed2.h2 == pytest.approx(P2.h1 - gamma)
    inner = v + sphere_points(2, 0.99 * P2.r1, 10, 5)
    assert np.allclose(f.value(inner), perturbed2.h2)


def test_perturbation_is_local(base2, perturbed2):
    rng = np.random.default_rng(6)
    pts = rng.uniform(-3 * P2.R, 3 * P2.R, (20000, 2))
    dist = np.linalg.norm(pts - perturbed2.v, axis=1)
    diff = np.asarray(perturbed2.potential.value(pts)) - np.asarray(base2.potential.value(pts))
    assert np.all(diff[dist > P2.r2] == 0.0)
    near = perturbed2.v + sphere_points(2, 0.5 * (P2.r1 + P2.r2), 20, 7)
    assert np.all(np.asarray(perturbed2.potential.value(near)) < P2.h1)


def test_perturbed_gradient_and_smoothness(perturbed2):
    rng = np.random.default_rng(8)
    pts = np.vstack([perturbed2.v + rng.uniform(-P2.r2, P2.r2, (60, 2)),
                     rng.uniform(-2 * P2.R, 2 * P2.R, (40, 2))])
    check_gradient(perturbed2.potential, pts)
    near = metrics.ball_points(2, P2.r2, 1000, 1, perturbed2.v)
    c = metrics.smoothness_probe(perturbed2.potential, (np.zeros(2), 3 * P2.R), 1000, points=near)
    assert c <= PERTURBED_SMOOTHNESS_C * P2.L


def test_perturbed_moment_and_mass(perturbed2):
    grid = quad_grid(P2, 2)
    m2, _ = metrics.second_moment(perturbed2.potential, grid=grid)
    assert m2 <= 24 * P2.M
    z = math.exp(log_mass(perturbed2.potential, grid))
    assert 1 - 16 * P2.eps <= z <= 1 + 10 * P2.eps


def test_perturbed_rejects_off_sphere_center(base2):
    with pytest.raises(DomainError):
        instances.build_perturbed(base2, np.array([P2.R / 2, 0.0]), 5.0)


def test_pack_caps_disjoint_and_on_sphere():
    caps = instances.pack_caps(P2, 10, seed=1)
    assert len(caps) >= 2
    assert np.allclose(np.linalg.norm(caps, axis=1), 0.75 * P2.R)
    for i in range(len(caps)):
        for j in range(i + 1, len(caps)):
            assert np.linalg.norm(caps[i] - caps[j]) > 2 * P2.r2
    one = instances.pack_caps(P2, 1, seed=1)
    assert one.shape == (1, 2)
    assert np.array_equal(instances.pack_caps(P2, 10, seed=1), caps)


def test_pack_caps_count_in_dimension_five():
    params = instances.LowerBoundParams(5, 16.0, 4.0, 0.001)
    caps = instances.pack_caps(params, 8, seed=0)
    assert len(caps) >= 4


def test_stitched_reference_values():
    u = np.array([20.0, 0.0])
    f = instances.build_stitched(u)
    assert f.value(u) == 0.0
    assert f.value(np.zeros(2)) == 0.0
    x_in = u + np.array([0.0, 7.9])
    assert f.value(x_in) == pytest.approx(0.5 * 7.9**2)
    x_out = u + np.array([-10.5, 0.0])
    assert f.value(x_out) == pytest.approx(0.5 * 9.5**2)
    with pytest.raises(DomainError):
        instances.build_stitched(np.array([5.0, 5.0]))


def test_stitched_gradient_and_smoothness():
    u = np.array([12.0, 16.0])
    f = instances.build_stitched(u)
    rng = np.random.default_rng(9)
    check_gradient(f, u + rng.uniform(-12, 12, (100, 2)))
    c = metrics.smoothness_probe(f, (u, 0.55 * 20.0), 1000)
    assert c <= STITCHED_T0_BOUND


def test_opt_instance_values():
    inst = instances.build_opt_instance(np.array([1.0, 0.0]), 1.0, 0.5, 10.0, 0.01)
    f, r = inst.potential, inst.r
    assert r == pytest.approx(math.sqrt((2 * math.pi**2 + math.pi) * 0.01))
    assert f.value(inst.center) == pytest.approx(-0.01)
    edge = inst.center + np.array([0.0, r])
    assert f.value(edge * (1 - 1e-12)) == pytest.approx(0.0, abs=1e-12)
    assert f.value(np.array([-3.0, 0.0])) == 0.0
    assert f.value(np.array([7.0, 0.0])) == pytest.approx(0.5 * 2.0**2)
    rng = np.random.default_rng(11)
    check_gradient(f, np.vstack([inst.center + rng.uniform(-r, r, (50, 2)), rng.uniform(-8, 8, (50, 2))]))


def test_opt_instance_parameter_errors():
    with pytest.raises(DomainError):
        instances.build_opt_instance(np.zeros(2), 1.0, 0.8, 10.0, 0.01)
    with pytest.raises(DomainError):
        instances.build_opt_instance(np.zeros(2), 1.0, 0.5, 0.1, 0.5)
    with pytest.raises(DomainError):
        instances.build_opt_instance(np.array([4.9, 0.0]), 1.0, 0.5, 10.0, 0.01)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_opt_centers_disjoint(d):
    R, r = 10.0, instances.bump_radius(1.0, 0.01)
    pts = instances.pack_opt_centers(R, r, d)
    assert len(pts) > 0
    assert np.all(np.linalg.norm(pts, axis=1) <= R / 2 - r + 1e-12)
    diffs = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts)) * 1e9
    assert diffs.min() >= 2 * r - 1e-12
