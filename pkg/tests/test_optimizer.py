from dataclasses import replace

import numpy as np
import pytest
import scipy.linalg
import scipy.optimize

from gmed.data import (
    ConstraintMatrix,
    Dataset,
    ModelParameters,
    UnitRecord,
    identity_constraint,
    pooled_covariance,
)
from gmed.exceptions import InfeasibleStart, RankDeficientDesign
from gmed.likelihood import neg_hier_loglik
from gmed.optimizer import (
    OptimizerConfig,
    closed_form_update,
    fit_component,
    fit_fixed_theta,
    initialize,
    newton_block_update,
    solve_theta,
    spd_inverse_sqrt,
)
from gmed.simulate import SimulationDesign, generate_dataset, similarity

from conftest import make_units


def dataset_from(units, **kw):
    return Dataset.from_units(units, **kw)


class TestInitialize:
    def test_ols_recovers_planted_outcome_model(self, rng):
        # Noise-free outcome generated from the log-variance regression is
        # recovered exactly by the initialization OLS.
        units = make_units(rng, n=30, t=12, p=3, q=1)
        theta0 = np.array([1.0, 0.0, 0.0])
        quads = [theta0 @ (u.mediator.T @ u.mediator / u.n_obs) @ theta0 for u in units]
        fixed = [
            UnitRecord(
                u.unit_id,
                u.exposure,
                u.confounders,
                0.3 + 0.7 * u.exposure - 0.2 * u.confounders[0] + 1.5 * np.log(q),
                u.mediator,
            )
            for u, q in zip(units, quads)
        ]
        params = initialize(theta0, dataset_from(fixed))
        assert params.gamma0 == pytest.approx(0.3, abs=1e-8)
        assert params.gamma_block[0] == pytest.approx(0.7, abs=1e-8)
        assert params.gamma_block[1] == pytest.approx(-0.2, abs=1e-8)
        assert params.beta == pytest.approx(1.5, abs=1e-8)
        assert params.sigma2 == pytest.approx(1e-6)  # floored

    def test_constant_outcome_gives_zero_beta(self, rng):
        units = make_units(rng, n=20, t=10, p=2)
        fixed = [
            UnitRecord(u.unit_id, u.exposure, u.confounders, 2.0, u.mediator) for u in units
        ]
        theta0 = np.array([1.0, 0.0])
        params = initialize(theta0, dataset_from(fixed))
        assert params.beta == pytest.approx(0.0, abs=1e-10)
        assert params.sigma2 == pytest.approx(1e-6)

    def test_intercepts_start_at_log_quads(self, rng):
        units = make_units(rng, n=8, t=10, p=3)
        data = dataset_from(units)
        theta0 = np.array([0.0, 1.0, 0.0])
        params = initialize(theta0, data)
        assert np.allclose(params.alpha0i, np.log(data.quad_model(theta0)))
        assert params.alpha0 == pytest.approx(params.alpha0i.mean())
        assert np.allclose(params.alpha_block, 0.0)

    def test_orthogonal_start_infeasible(self):
        mediator = np.array([[1.0, 0.0], [2.0, 0.0]])
        u = UnitRecord("a", 0.0, np.zeros(0), 0.0, mediator)
        with pytest.raises(InfeasibleStart):
            initialize(np.array([0.0, 1.0]), dataset_from([u]))


class TestNewtonBlock:
    def test_zero_step_at_stationary_point(self, rng):
        units = make_units(rng, n=10, t=12, p=3)
        data = dataset_from(units)
        theta0 = np.array([1.0, 0.0, 0.0])
        params = initialize(theta0, data)
        # converge the blocks, then one more update must not move
        fitted, _, _ = fit_fixed_theta(data, theta0)
        again = newton_block_update(fitted, data)
        assert np.allclose(again.alpha_block, fitted.alpha_block, atol=1e-8)
        assert np.allclose(again.alpha0i, fitted.alpha0i, atol=1e-8)
        del params

    def test_scalar_intercept_matches_bisection(self):
        # p=1, n=1, q=0, zero exposure: the intercept solves
        # T(1 - S e^{-a}) + 2(a - alpha0)/pi2 = 0, found here by bisection.
        mediator = np.array([[2.0], [1.0], [-1.0]])
        u = UnitRecord("a", 0.0, np.zeros(0), 0.5, mediator)
        data = dataset_from([u])
        s = float(data.quad_model(np.array([1.0]))[0])
        t_obs, alpha0, pi2 = 3.0, 0.2, 0.7
        params = ModelParameters(
            theta=np.array([1.0]),
            alpha0i=np.array([0.0]),
            alpha0=alpha0,
            alpha_block=np.array([0.0]),
            gamma0=0.0,
            gamma_block=np.array([0.0]),
            beta=0.0,
            pi2=pi2,
            sigma2=1.0,
        )
        cfg = OptimizerConfig(newton_max_iter=100)
        updated = newton_block_update(params, data, cfg)

        def grad(a):
            return t_obs * (1 - s * np.exp(-a)) + 2 * (a - alpha0) / pi2

        root = scipy.optimize.brentq(grad, -10, 10, xtol=1e-12)
        assert updated.alpha0i[0] == pytest.approx(root, abs=1e-8)

    def test_objective_never_increases(self, rng):
        units = make_units(rng, n=12, t=10, p=3, q=1)
        data = dataset_from(units)
        theta0 = np.array([1.0, 0.0, 0.0])
        params = initialize(theta0, data)
        before = neg_hier_loglik(params, data)
        for _ in range(5):
            params = newton_block_update(params, data)
            after = neg_hier_loglik(params, data)
            assert after <= before + 1e-12 * abs(before)
            before = after


class TestClosedForm:
    def test_equal_intercepts_floor_variance(self, rng):
        units = make_units(rng, n=10, t=8, p=2)
        data = dataset_from(units)
        params = initialize(np.array([1.0, 0.0]), data)
        params = replace(params, alpha0i=np.full(10, 0.37))
        updated = closed_form_update(params, data)
        assert updated.alpha0 == pytest.approx(0.37)
        assert updated.pi2 == pytest.approx(1e-10)

    def test_noiseless_outcome_recovered_exactly(self, rng):
        units = make_units(rng, n=25, t=10, p=3, q=1)
        theta0 = np.array([0.0, 0.0, 1.0])
        quads = [theta0 @ (u.mediator.T @ u.mediator / u.n_obs) @ theta0 for u in units]
        fixed = [
            UnitRecord(
                u.unit_id,
                u.exposure,
                u.confounders,
                -0.4 + 1.2 * u.exposure + 0.5 * u.confounders[0] - 0.9 * np.log(q),
                u.mediator,
            )
            for u, q in zip(units, quads)
        ]
        data = dataset_from(fixed)
        params = initialize(theta0, data)
        updated = closed_form_update(params, data)
        assert updated.gamma0 == pytest.approx(-0.4, abs=1e-8)
        assert updated.gamma_block[0] == pytest.approx(1.2, abs=1e-8)
        assert updated.gamma_block[1] == pytest.approx(0.5, abs=1e-8)
        assert updated.beta == pytest.approx(-0.9, abs=1e-8)
        assert updated.sigma2 == pytest.approx(1e-10)

    def test_constant_exposure_rank_deficient(self, rng):
        units = make_units(rng, n=10, t=8, p=2)
        fixed = [
            UnitRecord(u.unit_id, 1.0, u.confounders, u.outcome, u.mediator) for u in units
        ]
        data = dataset_from(fixed)
        params = initialize(np.array([1.0, 0.0]), data)
        with pytest.raises(RankDeficientDesign):
            closed_form_update(params, data)


class TestSolveTheta:
    def _diag_state(self):
        # Single unit engineered so that T*U*S = diag(3, 1) with beta = 0.
        mediator = np.vstack([np.sqrt(3.0) * np.eye(2)[0], np.eye(2)[1], -np.sqrt(3.0) * np.eye(2)[0], -np.eye(2)[1]])
        u = UnitRecord("a", 0.0, np.zeros(0), 0.0, mediator)
        data = dataset_from([u])
        # S = diag(3, 1)/2, T = 4 -> choose U = 1/2 via alpha0i = log 2
        params = ModelParameters(
            theta=np.array([1.0, 0.0]),
            alpha0i=np.array([np.log(2.0)]),
            alpha0=np.log(2.0),
            alpha_block=np.array([0.0]),
            gamma0=0.0,
            gamma_block=np.array([0.0]),
            beta=0.0,
            pi2=1.0,
            sigma2=1.0,
        )
        assert np.allclose(data.cov_model[0], np.diag([1.5, 0.5]))
        return params, data

    def test_two_candidate_hand_case(self):
        params, data = self._diag_state()
        h = identity_constraint(2)
        theta, lam = solve_theta(params, data, h)
        # A = diag(3, 1); candidates e1 (lambda 3) and e2 (lambda 1);
        # the Lagrangian 0.5 theta'A theta is minimized by e2.
        assert lam == pytest.approx(1.0)
        assert np.allclose(np.abs(theta), [0.0, 1.0], atol=1e-12)

    def test_constraint_satisfied(self, rng):
        units = make_units(rng, n=8, t=12, p=4)
        data = dataset_from(units)
        h = pooled_covariance(units)
        params = initialize(np.array([1.0, 0, 0, 0]) / np.sqrt(h.matrix[0, 0]), data)
        theta, _ = solve_theta(params, data, h)
        assert abs(theta @ h.matrix @ theta - 1.0) <= 1e-8

    @pytest.mark.parametrize("trial", range(4))
    def test_matches_generalized_eigensolver(self, trial):
        rng = np.random.default_rng(trial)
        p = 5
        units = make_units(rng, n=6, t=10, p=p)
        data = dataset_from(units)
        b = rng.standard_normal((p, p))
        h = ConstraintMatrix(b @ b.T + p * np.eye(p), "pooled")
        theta0 = rng.standard_normal(p)
        theta0 /= np.sqrt(theta0 @ h.matrix @ theta0)
        params = initialize(theta0, data)
        from gmed.likelihood import build_A_matrix

        a = build_A_matrix(params, data)
        # oracle: scipy generalized symmetric eigensolver on (A, H)
        vals, vecs = scipy.linalg.eigh(a, h.matrix)
        transform = spd_inverse_sqrt(h.matrix)
        bmat = transform @ a @ transform
        vals2, vecs2 = np.linalg.eigh(0.5 * (bmat + bmat.T))
        thetas2 = transform @ vecs2
        assert np.allclose(np.sort(vals), np.sort(vals2), atol=1e-8)
        for j in range(p):
            v1 = vecs[:, j] / np.sqrt(vecs[:, j] @ h.matrix @ vecs[:, j])
            k = int(np.argmin(np.abs(vals2 - vals[j])))
            v2 = thetas2[:, k]
            v2 = v2 / np.sqrt(v2 @ h.matrix @ v2)
            if v1[np.argmax(np.abs(v1))] < 0:
                v1 = -v1
            if v2[np.argmax(np.abs(v2))] < 0:
                v2 = -v2
            assert np.allclose(v1, v2, atol=1e-8)


class TestFitComponent:
    def test_planted_component_recovered(self):
        design = SimulationDesign(p=5, n=150, T=150, mediation_dims=(2,), seed=5)
        units, truth = generate_dataset(design)
        h = pooled_covariance(units)
        cfg = OptimizerConfig(n_random_starts=4, seed=2)
        fit, trace = fit_component(Dataset.from_units(units), h, cfg)
        assert similarity(fit.theta.theta, truth.pi[:, 1]) >= 0.99
        diffs = np.diff(trace.objectives)
        slack = 1e-12 * np.abs(trace.objectives[:-1])
        assert np.all(diffs <= slack)

    def test_deterministic_given_seed(self, rng):
        units = make_units(rng, n=15, t=12, p=3)
        data = dataset_from(units)
        h = pooled_covariance(units)
        cfg = OptimizerConfig(n_random_starts=3, seed=9)
        fit1, trace1 = fit_component(data, h, cfg)
        fit2, trace2 = fit_component(data, h, cfg)
        assert np.array_equal(fit1.theta.theta, fit2.theta.theta)
        assert fit1.loglik == fit2.loglik
        assert np.array_equal(trace1.objectives, trace2.objectives)

    def test_mediator_scaling_shifts_intercepts_only(self, rng):
        units = make_units(rng, n=20, t=15, p=3)
        c = 2.5
        scaled = [
            UnitRecord(u.unit_id, u.exposure, u.confounders, u.outcome, c * u.mediator)
            for u in units
        ]
        h = identity_constraint(3)
        cfg = OptimizerConfig(n_random_starts=4, seed=3)
        fit1, _ = fit_component(dataset_from(units), h, cfg)
        fit2, _ = fit_component(dataset_from(scaled), h, cfg)
        shift = 2 * np.log(c)
        assert similarity(fit1.theta.theta, fit2.theta.theta) >= 1 - 1e-6
        assert fit2.params.alpha0 == pytest.approx(fit1.params.alpha0 + shift, abs=1e-6)
        assert np.allclose(fit2.params.alpha0i, fit1.params.alpha0i + shift, atol=1e-5)
        assert np.allclose(fit2.params.alpha_block, fit1.params.alpha_block, atol=1e-6)
        assert fit2.params.beta == pytest.approx(fit1.params.beta, abs=1e-6)

    def test_fixed_theta_refit_reproduces_fit(self, rng):
        units = make_units(rng, n=15, t=10, p=3)
        data = dataset_from(units)
        h = pooled_covariance(units)
        cfg = OptimizerConfig(n_random_starts=3, seed=4)
        fit, _ = fit_component(data, h, cfg)
        refit, obj, converged = fit_fixed_theta(data, fit.theta.theta, cfg)
        assert converged
        assert obj == pytest.approx(fit.loglik, rel=1e-10)
        assert np.allclose(refit.alpha_block, fit.params.alpha_block, atol=1e-8)
        assert np.allclose(refit.gamma_block, fit.params.gamma_block, atol=1e-8)
        assert refit.beta == pytest.approx(fit.params.beta, abs=1e-8)
        assert np.allclose(refit.alpha0i, fit.params.alpha0i, atol=1e-8)

    def test_config_validation(self):
        with pytest.raises(Exception):
            OptimizerConfig(max_outer_iter=0)
        with pytest.raises(Exception):
            OptimizerConfig(tol_obj=2.0)
        with pytest.raises(Exception):
            OptimizerConfig(n_random_starts=-1)

    def test_thread_count_does_not_change_result(self, rng):
        units = make_units(rng, n=12, t=10, p=3)
        data = dataset_from(units)
        h = pooled_covariance(units)
        cfg = OptimizerConfig(n_random_starts=3, seed=6)
        fit1, trace1 = fit_component(data, h, cfg, threads=1)
        fit2, trace2 = fit_component(data, h, cfg, threads=3)
        assert np.array_equal(fit1.theta.theta, fit2.theta.theta)
        assert fit1.loglik == fit2.loglik
        assert fit1.start_index == fit2.start_index
        assert np.array_equal(trace1.objectives, trace2.objectives)
