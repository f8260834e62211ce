import numpy as np
import pandas as pd
import pytest

from agents.convergence_agent import (ConvergenceAgent, QuadraticBilevel, run_rate_experiment,
                                      unrolled_hypergradient, verify_bound)
from models.config_model import LabConfig
from utils.exceptions import DivergenceError


@pytest.fixture
def problem():
    return QuadraticBilevel.random(0)


def test_random_problem_is_well_posed(problem):
    eigs = np.linalg.eigvalsh(problem.A)
    assert np.all(eigs >= 1.0 - 1e-9) and np.all(eigs <= 4.0 + 1e-9)
    assert problem.B.shape == (5, 3)
    assert problem.lipschitz >= eigs.max()


def test_closed_form_matches_reverse_mode_through_the_inner_step(problem, rng):
    for _ in range(5):
        theta, omega = rng.normal(size=3), rng.normal(size=5)
        np.testing.assert_allclose(unrolled_hypergradient(problem, theta, omega, 0.15),
                                   problem.exact_hypergradient(theta, omega, 0.15), rtol=1e-10, atol=1e-12)


def test_closed_forms_are_batched_over_rows(problem, rng):
    theta, omega = rng.normal(size=(4, 3)), rng.normal(size=(4, 5))
    batched = problem.exact_hypergradient(theta, omega, 0.1)
    for i in range(4):
        np.testing.assert_allclose(batched[i], problem.exact_hypergradient(theta[i], omega[i], 0.1))


def test_noise_free_init_trace_decreases_monotonically(problem):
    leg = run_rate_experiment(problem, 200, trace="mil", sigma=0.0, repeats=3)
    assert np.all(np.diff(leg.grad_norm_sq) <= 1e-12)
    assert leg.noise_count == 0
    assert leg.alpha == leg.beta == pytest.approx(min(1.0 / problem.lipschitz, 1.0 / np.sqrt(200)))


def test_noisy_trace_shapes_and_noise_mean(problem):
    leg = run_rate_experiment(problem, 100, trace="mfl", sigma=1.0, repeats=8, seed=3)
    assert leg.grad_norm_sq.shape == (100,)
    assert leg.min_grad_sq.shape == (8,)
    assert leg.noise_count == 100 * 8 * 3
    assert leg.noise_mean_within()
    assert leg.rho >= np.sqrt(leg.grad_norm_sq[0])
    frame = leg.to_frame()
    assert list(frame.columns) == ["t", "grad_norm_sq", "loss", "alpha_t", "beta_t"]


def test_rate_experiments_are_seeded(problem):
    a = run_rate_experiment(problem, 50, trace="mil", sigma=0.5, repeats=4, seed=9)
    b = run_rate_experiment(problem, 50, trace="mil", sigma=0.5, repeats=4, seed=9)
    assert np.array_equal(a.grad_norm_sq, b.grad_norm_sq)


def test_rate_experiment_errors(problem):
    with pytest.raises(ValueError):
        run_rate_experiment(problem, 10, trace="joint")
    with pytest.raises(DivergenceError):
        run_rate_experiment(problem, 10, divergence_threshold=1e-6)


def test_verify_bound_on_an_exact_power_law():
    horizons = [100, 1000, 10000]
    values = [3.0 / np.sqrt(t) for t in horizons]
    report = verify_bound(horizons, values)
    assert report.slope == pytest.approx(-0.5)
    assert report.c_fit == pytest.approx(3.0)
    assert report.passed
    assert max(abs(r) for r in report.residuals) < 1e-9
    assert "PASS" in report.to_text()


def test_verify_bound_flags_a_flat_curve():
    report = verify_bound([100, 1000, 10000], [0.5, 0.45, 0.4])
    assert not report.passed
    assert "FAIL" in report.to_text()


def test_verify_bound_needs_three_positive_points():
    with pytest.raises(ValueError):
        verify_bound([100, 1000], [0.1, 0.03])
    with pytest.raises(ValueError):
        verify_bound([100, 1000, 10000], [0.1, 0.0, 0.01])


def test_agent_writes_traces_and_report(tmp_path):
    cfg = LabConfig(horizons=[50, 100, 200], repeats=3, traces=["mil"])
    reports = ConvergenceAgent(cfg, seed=1).run(tmp_path / "lab")
    assert set(reports) == {"mil"}
    frame = pd.read_csv(tmp_path / "lab" / "trace_mil.csv")
    assert len(frame) == 200
    assert "trace=mil" in (tmp_path / "lab" / "rate_report.txt").read_text()


@pytest.mark.slow
@pytest.mark.parametrize("trace", ["mfl", "mil"])
def test_min_gradient_decays_like_inverse_sqrt_horizon(trace):
    cfg = LabConfig(horizons=[100, 1000, 10000, 100000], repeats=20, traces=[trace])
    report = ConvergenceAgent(cfg, seed=0).run()[trace]
    assert report.slope <= cfg.slope_threshold
