import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import semi_discrete
from w1ray.exact_ot import solve_w1
from w1ray.measures import Domain, bounding_domain, make_empirical
from w1ray.potential import (
    DiscretePotential,
    NotDifferentiableError,
    affine_deviation,
    check_affine_on_ray,
    check_grad_lipschitz_Aj,
    check_ray_crossings,
    dual_objective,
    evaluate,
    finite_difference_gradient,
    grad_penalty,
    gradient,
    gradient_fd_error,
    lipschitz_violation,
    potential_from_duals,
    ray_info,
    rays,
    w1_minibatch_estimate,
)


def brute_u(atoms, values, x):
    return min(v + np.linalg.norm(x - y) for y, v in zip(atoms, values))


def fitted(rng, d=2, m=150, k=5):
    mu, nu = semi_discrete(rng, d, m, k)
    plan, duals = solve_w1(mu, nu)
    return mu, nu, plan, duals, potential_from_duals(nu, duals, bounding_domain(mu, nu))


def test_single_atom_cone():
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    x = np.array([3.0, 4.0])
    assert evaluate(p, x) == pytest.approx(5.0)
    info = ray_info(p, x)
    assert np.allclose(info.grad, [0.6, 0.8])
    assert info.alpha == pytest.approx(5.0)
    assert info.beta == np.inf and not info.tie


def test_two_atom_ray_extents():
    p = DiscretePotential(np.array([[0.0, 0.0], [4.0, 0.0]]), np.zeros(2))
    info = ray_info(p, [1.0, 0.0])
    assert info.alpha == pytest.approx(1.0)
    assert info.beta == pytest.approx(1.0)
    assert info.active_atom == 0


def test_beta_capped_by_domain():
    dom = Domain(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1), dom)
    assert ray_info(p, [0.5, 0.0]).beta == pytest.approx(dom.diameter)


def test_kink_detected_and_reported():
    p = DiscretePotential(np.array([[0.0, 0.0], [2.0, 0.0]]), np.zeros(2))
    _, _, tie = gradient(p, [1.0, 0.5])
    assert tie
    with pytest.raises(NotDifferentiableError):
        ray_info(p, [1.0, 0.5])


def test_gradient_raises_on_atom():
    p = DiscretePotential(np.array([[0.0, 0.0], [2.0, 0.0]]), np.zeros(2))
    with pytest.raises(NotDifferentiableError):
        gradient(p, [0.0, 0.0])
    r = rays(p, np.array([[0.0, 0.0]]))
    assert r.at_atom[0] and np.all(r.grad[0] == 0)


def test_colinear_atoms_are_not_a_kink():
    # second atom lies on the ray with a value that keeps it active
    p = DiscretePotential(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.0, 1.0]))
    r = rays(p, np.array([[3.0, 0.0]]))
    assert not r.tie[0]
    assert r.alpha[0] == pytest.approx(3.0)
    assert r.endpoint_atom[0] == 0


def test_evaluate_matches_brute_force(rng):
    atoms, vals = rng.normal(size=(7, 3)), rng.uniform(0, 1, 7)
    p = DiscretePotential(atoms, vals)
    xs = rng.normal(size=(50, 3))
    assert np.allclose(evaluate(p, xs), [brute_u(atoms, vals, x) for x in xs])


def test_shift_keeps_gradient(rng):
    _, _, _, _, p = fitted(rng)
    xs = rng.uniform(-1, 1, (30, 2))
    a, b = rays(p, xs), rays(p.shifted(3.7), xs)
    assert np.allclose(a.grad, b.grad) and np.allclose(a.alpha, b.alpha)


def test_bad_potential_inputs():
    with pytest.raises(ValueError):
        DiscretePotential(np.zeros((2, 2)), np.zeros(3))
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        evaluate(p, np.zeros(3))


def test_affine_on_rays_and_fd(rng):
    _, _, _, _, p = fitted(rng)
    xs = rng.uniform(-1, 1, (40, 2))
    r = rays(p, xs)
    for x in xs[~r.tie]:
        assert check_affine_on_ray(p, x) <= 1e-9
    assert gradient_fd_error(p, xs) <= 1e-5


def test_affine_deviation_detects_curvature():
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    assert affine_deviation(p, [-1.0, 0.5], [1.0, 0.5]) > 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 3))
def test_lipschitz_property(seed, d):
    rng = np.random.default_rng(seed)
    mu, nu = semi_discrete(rng, d, 60, 4)
    _, duals = solve_w1(mu, nu)
    p = potential_from_duals(nu, duals)
    assert lipschitz_violation(p, bounding_domain(mu, nu), 2000, seed) <= 1e-12


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_perturbed_values_stay_lipschitz(seed):
    rng = np.random.default_rng(seed)
    p = DiscretePotential(rng.normal(size=(5, 2)), rng.normal(size=5) * 3)
    dom = Domain(np.array([-3.0, -3.0]), np.array([3.0, 3.0]))
    assert lipschitz_violation(p, dom, 2000, seed) <= 1e-12


@pytest.mark.parametrize("j", [1, 2, 4])
def test_gradient_lipschitz_on_sets(rng, j):
    _, _, _, _, p = fitted(rng)
    rep = check_grad_lipschitz_Aj(p, j, 1500, seed=j)
    assert rep.passed and rep.ratio <= 4 * j


def test_gradient_lipschitz_requires_domain():
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        check_grad_lipschitz_Aj(p, 1)
    with pytest.raises(ValueError):
        check_grad_lipschitz_Aj(p, 0, domain=Domain(np.zeros(2), np.ones(2)))


def test_rays_do_not_cross_off_kinks(rng):
    _, _, _, _, p = fitted(rng, m=80, k=4)
    rep = check_ray_crossings(p, rng.uniform(-1, 1, (30, 2)))
    assert rep.passed


def test_finite_difference_on_quadratic():
    g = finite_difference_gradient(lambda x: float(x @ x), np.array([1.0, -2.0]))
    assert np.allclose(g, [2.0, -4.0], atol=1e-8)


def test_grad_penalty_values():
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    assert grad_penalty(p, np.array([1.0, 1.0])) == 0.0
    steep = lambda x: 2.0 * x[0]  # noqa: E731
    assert grad_penalty(steep, np.array([0.3, 0.1])) == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("lam", [10.0, 1000.0])
def test_estimator_exact_full_population(rng, lam):
    mu, nu, _, duals, p = fitted(rng)
    ts = rng.uniform(size=len(mu))
    est = w1_minibatch_estimate(p, mu.points, nu.points, ts, lam, mu.weights, nu.weights)
    assert est == pytest.approx(duals.w1, abs=1e-9)
    assert dual_objective(p, mu, nu) == pytest.approx(duals.w1, abs=1e-12)


def test_estimator_paired_length_check():
    p = DiscretePotential(np.zeros((1, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        w1_minibatch_estimate(p, np.zeros((3, 2)), np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ValueError):
        w1_minibatch_estimate(p, np.zeros((2, 2)), np.zeros((2, 2)), np.zeros(2), lam=-1)


def test_estimator_accepts_callables():
    f = lambda x: float(np.linalg.norm(x))  # noqa: E731
    xs = np.array([[3.0, 4.0], [0.0, 1.0]])
    ys = np.zeros((2, 2))
    assert w1_minibatch_estimate(f, xs, ys, np.array([0.5, 0.5])) == pytest.approx(3.0, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ray_saturation(seed):
    rng = np.random.default_rng(seed)
    mu, nu = semi_discrete(rng, 2, 80, 4)
    _, duals = solve_w1(mu, nu)
    p = potential_from_duals(nu, duals, bounding_domain(mu, nu))
    r = rays(p, mu.points)
    for k in np.flatnonzero(~r.tie)[:20]:
        x, g, a, b = mu.points[k], r.grad[k], r.alpha[k], r.beta[k]
        u0 = evaluate(p, x)
        for t in np.linspace(0, a, 5):
            assert evaluate(p, x - t * g) == pytest.approx(u0 - t, abs=1e-9)
        for t in np.linspace(0, b, 5):
            assert evaluate(p, x + t * g) == pytest.approx(u0 + t, abs=1e-9)
        assert a >= 0 and b >= 0
