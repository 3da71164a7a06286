"""Tests for sandwich variances, W-operator sensitivities, policy-parameter
covariance, and projection confidence intervals.

Oracle strategies: direct matrix arithmetic reimplementation for the
sandwich on a tiny tuple set; exact quadratic surfaces for the covariance
(central differences are exact on quadratics); closed-form extrema of a
linear value over an ellipsoid for the projection interval.
"""

import numpy as np
import pytest

from latentdtr.belief_transform import MdpTuple, SummaryState, UtilitySpec, build_mdp_dataset
from latentdtr.errors import NumericalError, ValidationError
from latentdtr.inference import (
    FlatMaximumError,
    LatentSensitivityCache,
    policy_param_covariance,
    projection_ci,
    variance_average,
    variance_discounted,
    w_operator,
)
from latentdtr.regime import BasisSpec, PolicyParams
from latentdtr.v_learning import (
    ReferenceDistribution,
    assemble,
    importance_weights,
    solve_average_weights,
    solve_discounted_weights,
)

VALUE_SPEC = BasisSpec(kind="linear", use_x=False)
DIFF_SPEC = BasisSpec(kind="linear", use_x=False, intercept=False)


def _one_hot_state(s):
    b = np.zeros(2)
    b[s] = 1.0
    return SummaryState(b, np.array([0.0]))


def _small_tuples(rng, n=60):
    tuples = []
    for i in range(n):
        s = int(rng.integers(0, 2))
        s2 = int(rng.integers(0, 2))
        a = int(rng.integers(1, 3))
        u = float(rng.normal(1.0 - s, 0.5))
        tuples.append(
            MdpTuple(str(i), 1, _one_hot_state(s), a, u, _one_hot_state(s2),
                     behavior_prob=0.5)
        )
    return tuples


def _always_action_one():
    xi = np.zeros((2, VALUE_SPEC.dim(2, 1)))
    xi[0, 0] = 1.0
    return PolicyParams(xi=xi, kind="deterministic", basis=VALUE_SPEC)


class TestSandwichDiscounted:
    def test_matches_direct_arithmetic(self, rng):
        tuples = _small_tuples(rng)
        policy = _always_action_one()
        data = assemble(tuples, VALUE_SPEC, VALUE_SPEC)
        w = importance_weights(data, policy)
        fit = solve_discounted_weights(data, w, 0.9)
        R = ReferenceDistribution.empirical_initial(tuples)
        s2, comps = variance_discounted(data, fit, policy, R)

        # independent assembly with plain loops
        n = len(tuples)
        phi = data.phi_s
        phin = data.phi_next
        C1 = sum(
            w[i] * np.outer(phi[i], phi[i] - 0.9 * phin[i]) for i in range(n)
        ) / n
        resid = data.u + 0.9 * phin @ fit.alpha - phi @ fit.alpha
        C2 = sum(
            (w[i] * resid[i]) ** 2 * np.outer(phi[i], phi[i]) for i in range(n)
        ) / n
        m = R.mean_features(VALUE_SPEC)
        v = np.linalg.solve(C1, m)
        assert s2 == pytest.approx(float(v @ C2 @ v), rel=1e-10)

    def test_zero_residuals_zero_variance(self):
        # constant utility c with gamma=0 and a basis that fits it exactly
        tuples = []
        for i in range(20):
            s = _one_hot_state(i % 2)
            tuples.append(MdpTuple(str(i), 1, s, 1, 3.0, s, behavior_prob=1.0))
        policy = _always_action_one()
        data = assemble(tuples, VALUE_SPEC, VALUE_SPEC)
        w = importance_weights(data, policy)
        fit = solve_discounted_weights(data, w, 0.0)
        R = ReferenceDistribution.empirical_initial(tuples)
        s2, _ = variance_discounted(data, fit, policy, R)
        assert s2 == pytest.approx(0.0, abs=1e-18)


class TestSandwichAverage:
    def test_matches_direct_arithmetic(self, rng):
        tuples = _small_tuples(rng)
        policy = _always_action_one()
        data = assemble(tuples, DIFF_SPEC, VALUE_SPEC)
        w = importance_weights(data, policy)
        fit = solve_average_weights(data, w)
        omega, comps = variance_average(data, fit, policy)

        n = len(tuples)
        phi = data.phi_s
        phin = data.phi_next
        psi1 = np.hstack([np.ones((n, 1)), phi])
        diff = np.hstack([np.ones((n, 1)), phi - phin])
        zeta = np.concatenate([[fit.v_ave], fit.beta])
        resid = data.u - diff @ zeta
        D1 = sum(w[i] * np.outer(psi1[i], diff[i]) for i in range(n)) / n
        D2 = sum((w[i] * resid[i]) ** 2 * np.outer(psi1[i], psi1[i]) for i in range(n)) / n
        full = np.linalg.inv(D1) @ D2 @ np.linalg.inv(D1).T
        assert omega == pytest.approx(full[0, 0], rel=1e-10)


class TestLatentSensitivity:
    def _setup(self, tiny_model, rng, uspec, value_spec, policy_spec):
        from latentdtr.ct_hmm import Trajectory

        trajs = []
        for i in range(8):
            J = 4
            x = rng.normal(0.7, 1.0, (J, 1))
            trajs.append(
                Trajectory(
                    times=np.concatenate([[0.0], np.sort(rng.uniform(0.1, 2, J - 1))]),
                    actions=rng.integers(1, 3, J),
                    x=x,
                    subject_id=str(i),
                )
            )
        behavior = lambda x, b: np.array([0.5, 0.5])
        tuples = build_mdp_dataset(trajs, tiny_model, uspec, behavior_probs=behavior)
        return trajs, tuples, behavior

    def test_belief_free_pipeline_has_zero_jacobian(self, tiny_model, rng):
        # nothing downstream depends on the beliefs, so dG/dtheta must vanish
        uspec = UtilitySpec("neg_abs", {"constant": 1.0, "indices": (0,)})
        spec = BasisSpec(kind="linear", use_belief=False)
        trajs, tuples, behavior = self._setup(tiny_model, rng, uspec, spec, spec)
        cache = LatentSensitivityCache(
            trajs, tuples, tiny_model, uspec, spec, spec, behavior_probs=behavior
        )
        policy = PolicyParams(
            xi=np.array([[0.5, 0.2], [0.0, 0.0]]), kind="stochastic",
            floor=0.05, basis=spec,
        )
        jac = w_operator(cache, policy, "discounted")
        np.testing.assert_allclose(jac, 0.0, atol=1e-10)

    def test_richardson_step_consistency(self, tiny_model, rng):
        # halving the step should not move the central-difference Jacobian
        # beyond its O(h^2) truncation error
        uspec = UtilitySpec("belief_match", {"groups": ((0,), (1,))})
        spec = BasisSpec(kind="linear")
        trajs, tuples, behavior = self._setup(tiny_model, rng, uspec, spec, spec)
        policy = PolicyParams(
            xi=np.array([[0.5, 0.2, -0.1], [0.0, 0.0, 0.0]]),
            kind="stochastic", floor=0.05, basis=spec,
        )
        jacs = []
        for step in (2e-4, 1e-4):
            cache = LatentSensitivityCache(
                trajs, tuples, tiny_model, uspec, spec, spec,
                behavior_probs=behavior, step=step,
            )
            jacs.append(cache.c3(policy, "discounted"))
        scale = max(np.abs(jacs[1]).max(), 1.0)
        assert np.abs(jacs[0] - jacs[1]).max() / scale < 1e-5

    def test_requires_exactly_one_behavior_source(self, tiny_model, rng):
        uspec = UtilitySpec("neg_abs", {"constant": 1.0, "indices": (0,)})
        spec = BasisSpec(kind="linear")
        trajs, tuples, behavior = self._setup(tiny_model, rng, uspec, spec, spec)
        with pytest.raises(ValidationError):
            LatentSensitivityCache(trajs, tuples, tiny_model, uspec, spec, spec)


class TestPolicyParamCovariance:
    def test_exact_on_quadratic_surface(self):
        # point values v_k(xi) = b_k' xi - 0.5 xi' A xi with A SPD: central
        # differences are exact, Sigma1 = A, Sigma2 = sum w_k g_k g_k'
        A = np.array([[2.0, 0.3], [0.3, 1.0]])
        B = np.array([[1.0, 0.5], [-0.5, 1.5], [0.2, -1.0]])
        wts = np.array([0.5, 0.3, 0.2])
        xi_hat = np.array([0.4, -0.2])

        def point_values(free):
            return B @ free - 0.5 * free @ A @ free

        def value(free):
            return float(wts @ point_values(free))

        cov, info = policy_param_covariance(value, point_values, wts, xi_hat.copy())
        grads = (B - A @ xi_hat).T  # (q, m) per-point gradients
        sigma2 = (grads * wts) @ grads.T
        expected = np.linalg.inv(A) @ sigma2 @ np.linalg.inv(A)
        np.testing.assert_allclose(cov, expected, atol=1e-8)
        np.testing.assert_allclose(info["sigma1"], A, atol=1e-8)

    def test_flat_surface_raises(self):
        wts = np.array([1.0])

        def point_values(free):
            return np.array([free[0] + 2 * free[1]])

        def value(free):
            return float(wts @ point_values(free))

        with pytest.raises(FlatMaximumError):
            policy_param_covariance(value, point_values, wts, np.zeros(2))
        cov, _ = policy_param_covariance(
            value, point_values, wts, np.zeros(2), repair=True
        )
        assert np.all(np.isfinite(cov))


class TestProjectionCi:
    def test_degenerate_covariance_reduces_to_wald(self):
        m = np.array([1.0, -2.0])
        s2 = 4.0
        n = 100
        evaluator = lambda pt: (float(m @ pt), s2)
        free_hat = np.array([0.5, 0.5])
        ci = projection_ci(free_hat, np.zeros((2, 2)), evaluator, eta=0.025, n=n)
        from scipy import stats

        z = stats.norm.ppf(1 - 0.025 / 2)
        half = z * np.sqrt(s2 / n)
        assert ci.plug_in == pytest.approx(-0.5)
        assert ci.lower == pytest.approx(-0.5 - half, abs=1e-12)
        assert ci.upper == pytest.approx(-0.5 + half, abs=1e-12)
        assert ci.level == pytest.approx(0.95)

    def test_linear_value_matches_ellipsoid_extrema(self):
        from scipy import stats

        m = np.array([1.0, 0.5])
        s2 = 1.0
        n = 400
        evaluator = lambda pt: (float(m @ pt), s2)
        free_hat = np.zeros(2)
        cov = np.eye(2)
        eta = 0.05
        ci = projection_ci(free_hat, cov, evaluator, eta=eta, n=n, n_points=1024)
        spread = np.sqrt(stats.chi2.ppf(1 - eta, 2)) * np.linalg.norm(m) / np.sqrt(n)
        half = stats.norm.ppf(1 - eta / 2) * np.sqrt(s2 / n)
        # sampled boundary maximum sits just inside the analytic extreme
        assert ci.upper <= spread + half + 1e-9
        assert ci.upper == pytest.approx(spread + half, rel=0.02)
        assert ci.lower == pytest.approx(-(spread + half), rel=0.02)

    def test_wider_covariance_widens_interval(self):
        m = np.array([1.0, 0.5])
        evaluator = lambda pt: (float(m @ pt), 1.0)
        a = projection_ci(np.zeros(2), np.eye(2), evaluator, eta=0.05, n=100)
        b = projection_ci(np.zeros(2), 4 * np.eye(2), evaluator, eta=0.05, n=100)
        assert b.upper > a.upper
        assert b.lower < a.lower

    def test_smaller_eta_widens_interval(self):
        m = np.array([1.0, 0.5])
        evaluator = lambda pt: (float(m @ pt), 1.0)
        a = projection_ci(np.zeros(2), np.eye(2), evaluator, eta=0.05, n=100)
        b = projection_ci(np.zeros(2), np.eye(2), evaluator, eta=0.01, n=100)
        assert b.upper > a.upper
        assert b.level > a.level

    def test_bad_eta_rejected(self):
        with pytest.raises(ValidationError):
            projection_ci(np.zeros(2), np.eye(2), lambda p: (0.0, 1.0), eta=0.7, n=10)

    def test_failing_evaluator_raises(self):
        def evaluator(pt):
            raise NumericalError("boom")

        with pytest.raises(NumericalError):
            projection_ci(np.zeros(2), np.eye(2), evaluator, eta=0.05, n=10)
