import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar
from scipy.special import expit
from scipy.stats import entropy

from prefdesign.complexity import (
    InfiniteDivergenceError,
    InstanceComplexity,
    bernoulli_kl,
    canonical_instance,
    complexity_bound,
    instance_complexity,
    log_bar,
    lower_bound,
    margin_and_ellstar,
    rho_star,
    rho_zero,
    sandwich_check,
)
from prefdesign.core import ArmSet, DegenerateInstanceError, InputDomainError
from prefdesign.design import rounding_threshold
from prefdesign.estimator import ConfidenceSpec, gamma_d

MU1 = expit(1.0) * (1 - expit(1.0))


class TestKL:
    @pytest.mark.parametrize("p,q", [(0.7311, 0.5), (0.1, 0.9), (0.5, 0.5), (0.99, 0.01)])
    def test_against_scipy_entropy(self, p, q):
        assert bernoulli_kl(p, q) == pytest.approx(entropy([p, 1 - p], [q, 1 - q]), abs=1e-12)

    def test_value(self):
        assert bernoulli_kl(0.7311, 0.5) == pytest.approx(0.11099, abs=1e-5)

    def test_zero_log_zero(self):
        assert bernoulli_kl(0.0, 0.3) == pytest.approx(-math.log(0.7))
        assert bernoulli_kl(1.0, 1.0) == 0.0

    def test_infinite(self):
        with pytest.raises(InfiniteDivergenceError):
            bernoulli_kl(0.5, 0.0)
        with pytest.raises(InputDomainError):
            bernoulli_kl(1.2, 0.5)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
           st.floats(0, 1))
    def test_jointly_convex_and_nonnegative(self, p1, q1, p2, q2, t):
        mix = bernoulli_kl(t * p1 + (1 - t) * p2, t * q1 + (1 - t) * q2)
        assert mix <= t * bernoulli_kl(p1, q1) + (1 - t) * bernoulli_kl(p2, q2) + 1e-12
        assert bernoulli_kl(p1, q1) >= 0

    def test_vectorized(self):
        out = bernoulli_kl(np.array([0.2, 0.5]), np.array([0.5, 0.5]))
        assert out.shape == (2,) and out[1] == 0.0


class TestComplexityQuantities:
    def test_margin_and_ellstar(self):
        arms = ArmSet(np.eye(2))
        assert margin_and_ellstar(arms, [1.0, 0.2]) == (pytest.approx(0.2), 5)
        assert margin_and_ellstar(arms, [1.0, 1.0])[1] == 2
        assert margin_and_ellstar(arms, [4.0, 5.0])[1] == 0
        with pytest.raises(DegenerateInstanceError):
            margin_and_ellstar(arms, [1.0, 0.0])

    def test_rho_star_closed_form(self):
        # orthogonal arms with unit margins: optimum is uniform, value 2 / mu'(1)
        assert rho_star(ArmSet(np.eye(2)), [1.0, 1.0]) == pytest.approx(2 / MU1, rel=1e-3)
        assert rho_star(ArmSet(np.eye(2)), [1.0, 1.0]) == pytest.approx(10.172, abs=1e-2)

    def test_rho_star_unequal_margins(self):
        # diagonal case: the value is sum_i a_i with a_i = 1/(mu'_i m_i^2),
        # attained at lam_i proportional to a_i
        m = np.array([1.0, 0.5])
        a = 1 / (expit(m) * (1 - expit(m)) * m**2)
        assert rho_star(ArmSet(np.eye(2)), m) == pytest.approx(a.sum(), rel=1e-3)

    def test_rho_zero_orthonormal(self):
        d, delta = 3, 0.1
        gam = gamma_d(ConfidenceSpec(delta, d, d))
        assert rho_zero(ArmSet(np.eye(d)), np.ones(d), d, delta) == pytest.approx(3 * gam * d / MU1, rel=1e-3)

    def test_log_bar(self):
        assert log_bar(5, 10, 0.1) == pytest.approx(math.log(2 * 25 * 10 * 12 / 0.1))

    def test_bound_terms_and_monotonicity(self):
        arms, model = canonical_instance(2, 0.2)
        ic = instance_complexity(arms, model, 0.05)
        d, omega, k0 = 2, 1.0, model.kappa0(arms)
        gam = gamma_d(ConfidenceSpec(0.05, 2, 2))
        s = 2 * ic.log_bar
        expected = s * ic.ell_star * (ic.rho_star + ic.rho_zero) + s * d * gam / k0 + ic.ell_star * rounding_threshold(d, omega)
        assert complexity_bound(ic, omega, k0, d, 0.05) == pytest.approx(expected)
        bigger = InstanceComplexity(ic.rho_star * 2, ic.rho_zero, ic.ell_star, ic.margin, ic.log_bar, ic.n_arms)
        assert complexity_bound(bigger, omega, k0, d, 0.05) > complexity_bound(ic, omega, k0, d, 0.05)
        assert complexity_bound(ic, omega, k0, d, 0.01) > complexity_bound(ic, omega, k0, d, 0.05)
        with pytest.raises(InputDomainError):
            complexity_bound(ic, omega, 0.3, d, 0.05)

    def test_instance_complexity_positive(self):
        with pytest.raises(InputDomainError):
            InstanceComplexity(0.0, 1.0, 1, 0.1, 1.0, 2)

    def test_canonical_validation(self):
        arms, model = canonical_instance(4, 0.1)
        assert np.array_equal(arms.features, np.eye(4))
        assert model.theta_star.tolist() == [1, 1, 1, 0.1]
        for d, eps in [(1, 0.1), (3, 0.25), (3, 0.0)]:
            with pytest.raises(InputDomainError):
                canonical_instance(d, eps)


def _game_value_brute_force(z, theta_star, step=0.01):
    """Grid over the simplex for n = 3 in d = 2, with a scalar inner solve on
    each one-dimensional constraint line."""
    p = expit(z @ theta_star)
    lines = []
    for j in range(len(z)):
        b = np.array([-z[j, 1], z[j, 0]])
        lines.append(b / np.linalg.norm(b))
    best = -math.inf
    grid = np.arange(0, 1 + 1e-12, step)
    for l1 in grid:
        for l2 in grid[grid <= 1 - l1 + 1e-12]:
            lam = np.array([l1, l2, max(0.0, 1 - l1 - l2)])
            inner = math.inf
            for b in lines:
                f = lambda t: float(lam @ bernoulli_kl(p, expit(z @ (t * b))))
                inner = min(inner, minimize_scalar(f, bounds=(-20, 20), method="bounded",
                                                   options={"xatol": 1e-10}).fun)
            best = max(best, inner)
    return best


class TestLowerBound:
    def test_single_arm(self):
        arms = ArmSet(np.array([[1.0]]))
        kl = bernoulli_kl(expit(1.0), 0.5)
        assert lower_bound(arms, [1.0], 0.01).value == pytest.approx(math.log(1 / 0.024) / kl, rel=1e-6)
        assert lower_bound(arms, [1.0], 0.01).value == pytest.approx(33.6, abs=0.1)

    def test_symmetric_pair(self):
        est = lower_bound(ArmSet(np.eye(2)), [1.0, 1.0], 0.01)
        assert est.value == pytest.approx(67.24, abs=0.01)
        np.testing.assert_allclose(est.design.weights, [0.5, 0.5], atol=1e-6)

    def test_trivial_delta(self):
        assert lower_bound(ArmSet(np.eye(2)), [1.0, 1.0], 1 / 2.4).value == 0.0

    def test_matches_brute_force_game(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(3, 2))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        theta = np.array([1.2, -0.7])
        est = lower_bound(ArmSet(z), theta, 0.05)
        brute = _game_value_brute_force(z, theta)
        upper = math.log(1 / 0.12) / est.value
        # the certified upper bound is above every grid value and close to the best
        assert brute <= upper * (1 + 1e-6)
        assert upper == pytest.approx(brute, rel=2e-2)
        assert est.converged

    def test_monotone_in_delta(self):
        arms, model = canonical_instance(3, 0.2)
        vals = [lower_bound(arms, model.theta_star, d).value for d in (0.2, 0.1, 0.05, 0.01)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_dimension_limit(self):
        arms, model = canonical_instance(11, 0.2)
        with pytest.raises(InputDomainError):
            lower_bound(arms, model.theta_star, 0.1)


class TestSandwich:
    def test_identical(self):
        arms = ArmSet(np.eye(2))
        assert sandwich_check(np.array([0.5, 0.5]), [1.0, 1.0], [1.0, 1.0], arms)

    def test_curvature_ratio(self):
        arms = ArmSet(np.eye(2))
        lam = np.array([0.5, 0.5])
        # mu'(u) = 0.25 / r at theta_star = 0 gives a curvature ratio of exactly r
        def margin_for(r):
            s = 0.5 + math.sqrt(0.25 - 0.25 / r)
            return math.log(s / (1 - s))
        assert sandwich_check(lam, [margin_for(2.5), 0.0], [0.0, 0.0], arms)
        assert not sandwich_check(lam, [margin_for(4.0), 0.0], [0.0, 0.0], arms)
        assert not sandwich_check(lam, [0.0, 0.0], [margin_for(4.0), 0.0], arms)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_unit_shift_always_inside(self, seed):
        # |z^T(theta_hat - theta_star)| <= 1 bounds every curvature ratio by e < 3
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(6, 3))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        theta_star = rng.normal(size=3) * 2
        shift = rng.normal(size=3)
        shift /= np.linalg.norm(shift)
        lam = rng.dirichlet(np.ones(6))
        assert sandwich_check(lam, theta_star + shift * rng.uniform(0, 1), theta_star, ArmSet(z))
