"""Tests for the iterative bootstrap engine."""

import math

import numpy as np
import pytest

from ib_bias.config import DampingSchedule, IBConfig
from ib_bias.errors import (
    InnerFailureBudgetExceeded,
    InsufficientPointsError,
    InvalidParameterError,
    MaxIterExceeded,
    NotPositiveDefiniteError,
)
from ib_bias.ib.binding import ProblemBinding
from ib_bias.ib.engine import (
    IBTrace,
    bootstrap_bias_corrected,
    convergence_rate_fit,
    evaluate_binding,
    ib_run,
    ib_step,
    ii_objective,
    ii_residual,
    simulation_index,
    two_step_ib,
)
from ib_bias.models import FitResult
from ib_bias.sim.rng import SeedSet
from ib_bias.toys import (
    LinearBiasToy,
    VarianceToy,
    toy_binding,
    toy_binding_exact,
    toy_fixed_point_closed_form,
)


def contractive_toy(**fields) -> LinearBiasToy:
    M = np.array([[0.2, 0.1], [-0.1, 0.3]])
    return LinearBiasToy(M=M, s=np.array([0.3, -0.2]), **fields)


def step_map() -> ProblemBinding:
    """Piecewise-constant binding 0.5 * floor(2 theta), jumping at theta = 1."""
    return ProblemBinding(
        simulate=lambda theta, seed: None,
        fit=None,
        dim=1,
        exact=lambda theta: 0.5 * np.floor(2.0 * theta),
    )


class TestAnalyticLimit:
    def test_variance_toy_limit(self):
        toy = VarianceToy(n=10)
        cfg = IBConfig(analytic=True, tol=1e-12)
        theta, trace = ib_run(np.array([2.0]), toy_binding(toy), cfg)
        assert trace.converged
        assert theta[0] == pytest.approx(2.0 * 10 / 9, abs=1e-10)

    def test_linear_toy_from_random_starts(self):
        toy = contractive_toy()
        binding = toy_binding(toy)
        pi_obs = np.array([1.0, 2.0])
        expected = toy_fixed_point_closed_form(toy, pi_obs)
        cfg = IBConfig(analytic=True, tol=1e-12, max_iter=500)
        gen = np.random.default_rng(0)
        for _ in range(20):
            theta, _ = ib_run(pi_obs, binding, cfg, theta0=gen.normal(0, 5, 2))
            np.testing.assert_allclose(theta, expected, atol=1e-9)

    def test_missing_exact_binding(self):
        binding = ProblemBinding(simulate=lambda theta, seed: None, fit=None, dim=1)
        with pytest.raises(InvalidParameterError):
            evaluate_binding(np.zeros(1), binding, IBConfig(analytic=True))

    def test_pi_obs_dimension(self):
        with pytest.raises(InvalidParameterError):
            ib_run(np.zeros(3), toy_binding(contractive_toy()), IBConfig(analytic=True))


class TestSimulatedLimit:
    def test_fixed_seed_limit_solves_noisy_equation(self):
        toy = contractive_toy(noise_sd=1.0, n=25)
        binding = toy_binding(toy)
        cfg = IBConfig(H=20, tol=1e-12, seed_set=SeedSet(master=9))
        # With fixed seeds the mean noise is the same at every theta.
        zero = np.zeros(2)
        mean_noise = evaluate_binding(zero, binding, cfg).mean - toy_binding_exact(toy, zero)
        pi_obs = np.array([0.5, -1.0])
        theta, trace = ib_run(pi_obs, binding, cfg)
        assert trace.converged
        expected = toy_fixed_point_closed_form(toy, pi_obs - mean_noise)
        np.testing.assert_allclose(theta, expected, atol=1e-9)
        assert trace.residual_norm < 1e-9

    def test_deterministic(self):
        binding = toy_binding(contractive_toy(noise_sd=1.0))
        cfg = IBConfig(H=10, seed_set=SeedSet(master=4))
        first, _ = ib_run(np.array([0.5, 0.5]), binding, cfg)
        second, _ = ib_run(np.array([0.5, 0.5]), binding, cfg)
        np.testing.assert_array_equal(first, second)

    def test_parallel_matches_serial(self):
        binding = toy_binding(VarianceToy(n=6))
        serial = IBConfig(H=8, seed_set=SeedSet(master=2))
        parallel = serial.model_copy(update={"n_jobs": 2})
        a, _ = ib_run(np.array([1.0]), binding, serial)
        b, _ = ib_run(np.array([1.0]), binding, parallel)
        np.testing.assert_array_equal(a, b)

    def test_final_estimates_cached(self):
        binding = toy_binding(VarianceToy(n=6))
        _, trace = ib_run(np.array([1.0]), binding, IBConfig(H=7))
        assert trace.final_estimates.shape == (7, 1)


class TestSeedIndex:
    def test_fixed_seeds_reuse_h(self):
        cfg = IBConfig(H=5)
        assert [simulation_index(cfg, 3, h) for h in (1, 5)] == [1, 5]

    def test_fresh_seeds_per_iteration(self):
        cfg = IBConfig(H=5, fixed_seeds=False)
        assert simulation_index(cfg, 1, 1) == 1
        assert simulation_index(cfg, 3, 2) == 12


class TestEfronIdentity:
    def test_first_step_is_bootstrap_correction(self):
        gen = np.random.default_rng(123)
        for trial in range(100):
            p = int(gen.integers(1, 4))
            M = gen.uniform(-0.2, 0.2, (p, p))
            toy = LinearBiasToy(M=M, s=gen.normal(size=p), noise_sd=2.0, n=int(gen.integers(5, 50)))
            binding = toy_binding(toy)
            cfg = IBConfig(H=int(gen.integers(2, 30)), seed_set=SeedSet(master=trial))
            pi_obs = gen.normal(size=p)
            evaluation = evaluate_binding(pi_obs, binding, cfg)
            step = ib_step(pi_obs, pi_obs, binding, cfg, evaluation=evaluation)
            np.testing.assert_array_equal(
                step, bootstrap_bias_corrected(pi_obs, evaluation.estimates)
            )


class TestDampingAndRescue:
    def expansive(self) -> ProblemBinding:
        return toy_binding(
            LinearBiasToy(M=np.array([[1.2]]), s=np.array([0.0]), contractive=False)
        )

    def test_contractive_constructor_check(self):
        with pytest.raises(InvalidParameterError):
            LinearBiasToy(M=np.array([[1.2]]), s=np.array([0.0]))

    def test_undamped_diverges(self):
        cfg = IBConfig(analytic=True, rescue=False, max_iter=50)
        with pytest.raises(MaxIterExceeded) as excinfo:
            ib_run(np.array([1.0]), self.expansive(), cfg)
        trace = excinfo.value.trace
        assert trace.step_norms[-1] > trace.step_norms[0]

    def test_damped_converges(self):
        cfg = IBConfig(analytic=True, rescue=False, damping=DampingSchedule(epsilon=0.4))
        theta, trace = ib_run(np.array([1.0]), self.expansive(), cfg)
        assert trace.converged
        assert theta[0] == pytest.approx(1.0 / 2.2, abs=1e-5)

    def test_rescue_halves_damping(self):
        cfg = IBConfig(analytic=True, rescue=True)
        theta, trace = ib_run(np.array([1.0]), self.expansive(), cfg)
        assert trace.converged
        assert trace.restarts
        assert trace.damping[-1] == 0.5
        assert theta[0] == pytest.approx(1.0 / 2.2, abs=1e-5)

    def test_non_strict_returns_trace(self):
        cfg = IBConfig(analytic=True, rescue=False, max_iter=5)
        _, trace = ib_run(np.array([1.0]), self.expansive(), cfg, strict=False)
        assert not trace.converged
        assert trace.iterations == 5

    def test_oscillation_across_jump_settles_on_it(self):
        cfg = IBConfig(analytic=True, max_iter=500)
        theta, trace = ib_run(np.array([0.7]), step_map(), cfg)
        assert trace.converged
        assert trace.restarts
        assert theta[0] == pytest.approx(1.0, abs=1e-5)
        assert 0.19 < trace.residual_norm < 0.31

    def test_steady_drift_is_not_damped(self):
        flat = ProblemBinding(
            simulate=lambda theta, seed: None,
            fit=None,
            dim=1,
            exact=lambda theta: np.full(1, 0.5),
        )
        cfg = IBConfig(analytic=True, max_iter=30)
        _, trace = ib_run(np.array([0.7]), flat, cfg, strict=False)
        assert not trace.converged
        assert not trace.restarts
        assert trace.damping == [1.0] * 30

    def test_geometric_schedule(self):
        schedule = DampingSchedule(kind="geometric", epsilon=1.0, rho=0.5, epsilon_min=0.2)
        assert [schedule.at(k) for k in (1, 2, 3)] == [0.5, 0.25, 0.2]


class TestFailureBudget:
    def failing(self) -> ProblemBinding:
        def fit(dataset) -> FitResult:
            return FitResult("Broken", np.array([math.nan]), False, 0, math.nan)

        return ProblemBinding(simulate=lambda theta, seed: None, fit=fit, dim=1)

    def test_all_failures_abort(self):
        with pytest.raises(InnerFailureBudgetExceeded):
            ib_run(np.array([1.0]), self.failing(), IBConfig(H=5))

    def test_non_converged_fits_count(self):
        def fit(dataset) -> FitResult:
            return FitResult("Slow", np.array([0.0]), False, 0, 1.0)

        binding = ProblemBinding(simulate=lambda theta, seed: None, fit=fit, dim=1)
        evaluation = evaluate_binding(np.zeros(1), binding, IBConfig(H=4))
        assert evaluation.failures == 4
        assert evaluation.estimates.shape == (4, 1)


class TestIndirectInference:
    def test_residual_vanishes_at_limit(self):
        toy = contractive_toy()
        cfg = IBConfig(analytic=True, tol=1e-12)
        pi_obs = np.array([1.0, 0.0])
        theta, _ = ib_run(pi_obs, toy_binding(toy), cfg)
        assert np.max(np.abs(ii_residual(theta, pi_obs, toy_binding(toy), cfg))) < 1e-10

    def test_objective_weighting(self):
        binding = toy_binding(contractive_toy())
        cfg = IBConfig(analytic=True)
        theta, pi_obs = np.zeros(2), np.array([1.0, 0.0])
        plain = ii_objective(theta, pi_obs, binding, cfg)
        assert ii_objective(theta, pi_obs, binding, cfg, phi=np.eye(2)) == pytest.approx(plain)
        assert ii_objective(theta, pi_obs, binding, cfg, phi=2 * np.eye(2)) == pytest.approx(
            2 * plain
        )

    def test_grid_argmin_matches_limit(self):
        binding = toy_binding(VarianceToy(n=10))
        cfg = IBConfig(analytic=True, tol=1e-12)
        pi_obs = np.array([1.0])
        theta, _ = ib_run(pi_obs, binding, cfg)
        grid = np.arange(0.5, 3.0, 1e-3)
        values = [ii_objective(np.array([g]), pi_obs, binding, cfg) for g in grid]
        assert abs(grid[int(np.argmin(values))] - theta[0]) <= 1e-3

    def test_objective_rejects_indefinite_phi(self):
        binding = toy_binding(contractive_toy())
        with pytest.raises(NotPositiveDefiniteError):
            ii_objective(
                np.zeros(2), np.ones(2), binding, IBConfig(analytic=True), phi=np.diag([1.0, -1.0])
            )


class TestConvergenceRate:
    def test_variance_toy_rate(self):
        cfg = IBConfig(analytic=True, tol=1e-13)
        _, trace = ib_run(np.array([1.0]), toy_binding(VarianceToy(n=10)), cfg, theta0=np.array([5.0]))
        eps, r2 = convergence_rate_fit(trace)
        assert eps == pytest.approx(0.1, abs=0.005)
        assert r2 > 0.999

    def test_scalar_linear_toy_rate(self):
        toy = LinearBiasToy(M=np.array([[0.5]]), s=np.array([0.0]))
        cfg = IBConfig(analytic=True, tol=1e-12)
        _, trace = ib_run(np.array([1.0]), toy_binding(toy), cfg, theta0=np.array([4.0]))
        eps, r2 = convergence_rate_fit(trace)
        assert 0.47 <= eps <= 0.53
        assert r2 > 0.999

    @pytest.mark.parametrize(
        "toy, rho",
        [
            (VarianceToy(n=10), 0.1),
            (LinearBiasToy(M=np.array([[0.5]]), s=np.array([0.0])), 0.5),
        ],
    )
    def test_monotone_contraction_tail(self, toy, rho):
        cfg = IBConfig(analytic=True, tol=1e-12)
        _, trace = ib_run(np.array([1.0]), toy_binding(toy), cfg, theta0=np.array([4.0]))
        norms = np.asarray(trace.step_norms)
        ratios = norms[4:] / norms[3:-1]
        assert ratios.size > 0
        assert np.all(np.abs(ratios - rho) <= 0.05)

    def test_too_few_points(self):
        trace = IBTrace(iterates=[np.zeros(1)], step_norms=[1.0, 0.1])
        with pytest.raises(InsufficientPointsError):
            convergence_rate_fit(trace)


class TestTwoStep:
    def test_analytic_second_stage_keeps_first(self):
        toy = contractive_toy()
        binding = toy_binding(toy)
        cfg = IBConfig(analytic=True, tol=1e-11)
        pi_obs = np.array([1.0, 2.0])
        first, _ = ib_run(pi_obs, binding, cfg)
        second, trace = two_step_ib(pi_obs, binding, cfg)
        assert trace.converged
        assert len(trace.stage_fits) == 2
        np.testing.assert_allclose(second, first, atol=1e-8)
        expected = toy_fixed_point_closed_form(toy, pi_obs)
        np.testing.assert_allclose(first, expected, atol=1e-6)
        np.testing.assert_allclose(second, expected, atol=1e-6)

    def test_simulated_counts_nested_fits(self):
        binding = toy_binding(VarianceToy(n=8))
        cfg = IBConfig(H=4, seed_set=SeedSet(master=3))
        theta, trace = two_step_ib(np.array([1.0]), binding, cfg)
        assert np.all(np.isfinite(theta))
        assert trace.stage_fits[1] > trace.stage_fits[0]
        assert trace.n_fits == sum(trace.stage_fits)
