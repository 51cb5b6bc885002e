import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest

from hovefl.core.analysis import (
    BoundForm,
    ConvergenceEstimates,
    Provenance,
    audit_descent,
    bound_curve,
    bound_vs_run,
    check_corollary1,
    compare_bound_forms,
    estimate_constants,
    estimate_lipschitz,
    estimate_pl,
    gradient_variance,
    gradient_norm_curve,
)
from hovefl.core.data import build_topology, generate_classification
from hovefl.core.entry import run_experiment
from hovefl.core.federation import build_state, run_federation
from hovefl.core.models import ModelKind, ParamLayout
from hovefl.core.numerics import STREAM_PARTITION, STREAM_PROBE, RngStream
from hovefl.utilities.config import TrainConfig
from hovefl.utilities.errors import BoundOverflowError, EstimationFailedError, MissingTraceError
from tests.utils import FunctionObjective, run_config

# rho=1, L=2, mu=1/4, sigma=0.1, Theta=1 gives q = 3/4 and L mu = 1/2
REFERENCE = ConvergenceEstimates(L_hat=2.0, rho_hat=1.0, sigma_hat=0.1, theta_hat=1.0)


def ridge_objective(regression_data, ridge_layout, n_horizontal=4, n_vertical=2, alpha=0.05):
    topology = build_topology(
        regression_data, n_horizontal, n_vertical, {"dirichlet_beta": 0.5, "min_per_device": 2},
        {}, ridge_layout, RngStream(0, STREAM_PARTITION),
    )
    return build_state(topology, regression_data, None, ridge_layout, TrainConfig(alpha=alpha), 0).objective


def test_lipschitz_is_exact_for_ridge(regression_data, ridge_layout):
    objective = ridge_objective(regression_data, ridge_layout)
    exact = float(np.linalg.eigvalsh(objective.quadratic_form().H)[-1])
    assert estimate_lipschitz(objective, 8, 1.0, RngStream(0, STREAM_PROBE)) == pytest.approx(exact, rel=1e-12)

    probed = FunctionObjective(objective.value, objective.gradient, objective.dim)
    empirical = estimate_lipschitz(probed, 64, 1.0, RngStream(0, STREAM_PROBE), safety_factor=1.0)
    assert 0.0 < empirical <= exact * (1 + 1e-9)


def test_lipschitz_of_linear_gradient():
    A = np.diag([1.0, 2.0, 3.0])
    objective = FunctionObjective(lambda m: 0.5 * m @ A @ m, lambda m: A @ m, 3)
    estimate = estimate_lipschitz(objective, 1000, 1.0, RngStream(1, STREAM_PROBE), safety_factor=1.0)
    assert 0.95 * 3.0 <= estimate <= 3.0 + 1e-9


def test_lipschitz_of_constant_objective_is_zero():
    objective = FunctionObjective(lambda m: 4.0, lambda m: np.zeros(3), 3)
    assert estimate_lipschitz(objective, 16, 1.0, RngStream(0)) == 0.0


def test_lipschitz_grows_with_probe_count():
    objective = FunctionObjective(
        lambda m: np.sum(np.log1p(np.exp(m))), lambda m: 1.0 / (1.0 + np.exp(-m)), 4
    )
    estimates = [
        estimate_lipschitz(objective, count, 2.0, RngStream(5, STREAM_PROBE), safety_factor=1.0)
        for count in (4, 16, 64)
    ]
    assert estimates == sorted(estimates)


def test_lipschitz_needs_two_probes():
    with pytest.raises(ValueError):
        estimate_lipschitz(FunctionObjective(lambda m: 0.0, lambda m: m, 2), 1, 1.0, RngStream(0))


def test_pl_is_smallest_eigenvalue_for_ridge(regression_data, ridge_layout):
    objective = ridge_objective(regression_data, ridge_layout)
    form = objective.quadratic_form()
    f_star = objective.value(form.minimizer())
    rho = estimate_pl(objective, f_star, 8, RngStream(0, STREAM_PROBE))
    assert rho == pytest.approx(float(np.linalg.eigvalsh(form.H)[0]), rel=1e-12)
    assert 0 < rho <= estimate_lipschitz(objective, 8, 1.0, RngStream(0))


def test_pl_of_one_dimensional_quadratic():
    c, a = 3.0, 0.5
    objective = FunctionObjective(lambda m: c * (m[0] - a) ** 2, lambda m: 2 * c * (m - a), 1)
    assert estimate_pl(objective, 0.0, 32, RngStream(0), radius=2.0) == pytest.approx(2 * c, rel=1e-12)


def test_pl_fails_when_every_probe_sits_at_the_optimum():
    objective = FunctionObjective(lambda m: float(m @ m), lambda m: 2 * m, 2)
    with pytest.raises(EstimationFailedError):
        estimate_pl(objective, 0.0, 8, RngStream(0), radius=0.0, center=np.zeros(2))


def test_gradient_variance_known_values():
    same = [np.array([1.0, 2.0])] * 3
    assert gradient_variance(same) == 0.0
    assert gradient_variance([np.array([1.0, 0.0]), np.array([-1.0, 0.0])]) == pytest.approx(math.sqrt(2))
    assert gradient_variance([np.array([5.0, -1.0])]) == 0.0
    with pytest.raises(ValueError):
        gradient_variance([])


def test_gradient_variance_ignores_common_shift():
    grads = [np.random.default_rng(i).normal(size=4) for i in range(5)]
    shift = np.array([10.0, -3.0, 0.5, 7.0])
    assert gradient_variance([g + shift for g in grads]) == pytest.approx(gradient_variance(grads), rel=1e-10)


def test_label_skew_raises_gradient_dispersion():
    def dispersion(beta, seed):
        ds = generate_classification(240, 5, 3, 2.5, seed=seed)
        layout = ParamLayout.for_dataset(ModelKind.LOGISTIC, ds)
        topology = build_topology(
            ds, 6, 0, {"dirichlet_beta": beta, "min_per_device": 2}, {}, layout, RngStream(seed, STREAM_PARTITION)
        )
        objective = build_state(topology, ds, None, layout, TrainConfig(), seed).objective
        return gradient_variance(objective.device_gradients(np.zeros(layout.dim)))

    skewed = [dispersion(0.1, seed) for seed in range(10)]
    balanced = [dispersion(100.0, seed) for seed in range(10)]
    assert all(s > b for s, b in zip(skewed, balanced))


def test_bound_without_noise_is_geometric():
    est = ConvergenceEstimates(L_hat=2.0, rho_hat=1.0, sigma_hat=0.0, theta_hat=3.0)
    for form in BoundForm:
        curve = bound_curve(est, 0.25, 20, form)
        np.testing.assert_allclose(curve.values, [3.0 * 0.75**t for t in range(21)], rtol=1e-14)


def test_bound_matches_exact_rational_arithmetic():
    q, lm, sigma_sq = Fraction(3, 4), Fraction(1, 2), Fraction(1, 100)
    drift = 2 * 1 * 2 * Fraction(1, 16) * sigma_sq
    geometric = [q**t + drift * sum(q ** (i - 1) for i in range(1, t + 1)) for t in range(11)]
    closed = [q**t + lm * sigma_sq * (q ** (t + 1) - 1) / (lm - 1) for t in range(11)]
    est = ConvergenceEstimates(2.0, 1.0, 0.1, 1.0)
    np.testing.assert_allclose(bound_curve(est, 0.25, 10).values, [float(v) for v in geometric], rtol=1e-12)
    np.testing.assert_allclose(
        bound_curve(est, 0.25, 10, BoundForm.CLOSED_FORM).values, [float(v) for v in closed], rtol=1e-12
    )


def test_closed_form_falls_back_at_inverse_smoothness():
    curve = bound_curve(REFERENCE, 0.5, 10, BoundForm.CLOSED_FORM)
    assert curve.form is BoundForm.GEOMETRIC_SUM
    assert curve.requested_form is BoundForm.CLOSED_FORM
    assert curve.fell_back
    assert not curve.mu_exceeds_inverse_L
    assert all(math.isfinite(v) for v in curve.values)


def test_bound_forms_agree_after_exponent_shift():
    report = compare_bound_forms(REFERENCE, 0.25, 50)
    assert not report["singular"]
    assert report["shifted_residual"] < 1e-10
    assert report["max_rel_discrepancy"] > 0
    assert compare_bound_forms(REFERENCE, 0.5, 10)["singular"]


def test_bound_is_non_increasing_above_its_floor():
    # floor of the geometric sum is 2 rho L mu^2 sigma^2 / (1 - q) = 0.01
    values = bound_curve(REFERENCE, 0.25, 100).values
    assert all(later <= earlier for earlier, later in zip(values, values[1:]))
    assert values[-1] == pytest.approx(0.01, rel=1e-6)


def test_bound_flags_large_learning_rate():
    curve = bound_curve(REFERENCE, 0.75, 10)
    assert curve.mu_exceeds_inverse_L
    assert curve.factor == pytest.approx(1.75)


def test_bound_overflow_reports_round():
    est = ConvergenceEstimates(L_hat=2.0, rho_hat=2.0, sigma_hat=0.1, theta_hat=1.0)
    with pytest.raises(BoundOverflowError) as exc:
        bound_curve(est, 100.0, 200)
    assert 0 < exc.value.t <= 200
    with pytest.raises(BoundOverflowError):
        gradient_norm_curve(est, 100.0, 200, 1.0)


def test_bound_rejects_bad_arguments():
    with pytest.raises(ValueError):
        bound_curve(REFERENCE, 0.0, 10)
    with pytest.raises(ValueError):
        bound_curve(REFERENCE, 0.1, -1)


def test_corollary_holds_above_threshold():
    report = check_corollary1(REFERENCE, 0.25, T=100)
    assert report.mu_condition
    assert report.theta_threshold == pytest.approx(0.0075)
    assert report.geometric_threshold == pytest.approx(0.01)
    assert report.conditions_hold
    assert report.numerically_convex


def test_corollary_fails_below_threshold():
    est = ConvergenceEstimates(L_hat=2.0, rho_hat=1.0, sigma_hat=0.1, theta_hat=0.001)
    report = check_corollary1(est, 0.25, T=100)
    assert not report.theta_condition
    assert report.numerically_convex is False
    assert report.min_second_difference < 0


def test_corollary_makes_no_claim_above_inverse_smoothness():
    report = check_corollary1(REFERENCE, 0.75)
    assert not report.mu_condition
    assert report.numerically_convex is None
    assert report.theta_threshold is None
    assert report.to_dict()["numerically_convex"] is None


def test_corollary_without_noise():
    est = ConvergenceEstimates(L_hat=2.0, rho_hat=1.0, sigma_hat=0.0, theta_hat=0.5)
    report = check_corollary1(est, 0.25, T=50)
    assert report.theta_threshold == 0.0
    assert report.conditions_hold and report.numerically_convex


def test_estimates_reject_invalid_constants():
    with pytest.raises(ValueError):
        ConvergenceEstimates(L_hat=1.0, rho_hat=2.0, sigma_hat=0.0, theta_hat=0.0)
    with pytest.raises(ValueError):
        ConvergenceEstimates(L_hat=float("nan"), rho_hat=0.0, sigma_hat=0.0, theta_hat=0.0)


def test_audit_of_frozen_model_is_clean(regression_data, ridge_layout):
    topology = build_topology(
        regression_data, 3, 1, {"dirichlet_beta": 0.5, "min_per_device": 2}, {}, ridge_layout, RngStream(0, STREAM_PARTITION)
    )
    cfg = TrainConfig(rounds=3).model_copy(update={"mu": 0.0})
    state = build_state(topology, regression_data, None, ridge_layout, cfg, 0)
    _, history = run_federation(state, cfg)
    audit = audit_descent(history, ConvergenceEstimates(1.0, 1.0, 0.0, 0.0), 0.0)
    assert audit.violations == []
    assert len(audit.rows) == 3


def test_audit_requires_objective_trace():
    record = SimpleNamespace(round=2, objective_before=1.0, objective=None, grad_norm=1.0, sigma_hat=0.0)
    with pytest.raises(MissingTraceError) as exc:
        audit_descent([record], REFERENCE, 0.1)
    assert exc.value.round == 2
    assert exc.value.field == "objective"
    with pytest.raises(MissingTraceError):
        bound_vs_run([], REFERENCE, 0.1)


def test_small_step_hybrid_ridge_run_is_dominated_by_bound():
    cfg = run_config(train={"mu_scale": 0.5, "t_local": 1, "rounds": 40}, analysis={"check_mu_bound": True})
    outcome = run_experiment(cfg)
    report = outcome.analysis
    assert report["descent_audit"]["violated_rounds"] == []
    assert report["dominance"]["violations"] == []
    assert report["estimates"]["provenance"]["L_hat"] == "analytic"
    assert len(outcome.bound_rows) == 41
    assert outcome.estimates.L_hat * outcome.experiment.mu == pytest.approx(0.5)


def test_large_step_run_trips_the_descent_audit():
    cfg = run_config(train={"mu_scale": 10.0, "t_local": 5, "rounds": 3})
    outcome = run_experiment(cfg)
    assert outcome.analysis["descent_audit"]["violated_rounds"]
    assert outcome.analysis["corollary"]["numerically_convex"] is None


def test_constants_for_logistic_run_are_empirical():
    cfg = run_config(
        dataset={"kind": "classification", "n_samples": 120, "n_features": 4, "n_classes": 2},
        model={"kind": "logistic"},
        train={"mu": 0.5, "rounds": 10},
        analysis={"reference_steps": 200},
    )
    outcome = run_experiment(cfg)
    est = outcome.estimates
    assert est.provenance["rho_hat"] is Provenance.EMPIRICAL
    assert 0 < est.rho_hat <= est.L_hat
    assert est.f_star < min(record.objective for record in outcome.history)
    assert est.sigma_hat == max(record.sigma_hat for record in outcome.history)

    again = estimate_constants(
        outcome.experiment.state.objective,
        outcome.history,
        outcome.experiment.initial_params.theta,
        RngStream(cfg.seed, STREAM_PROBE),
        probe_count=8,
        reference_steps=200,
    )
    assert again.to_dict() == est.to_dict()


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(10))
def test_bound_dominance_over_long_runs(seed):
    cfg = run_config(seed=seed, train={"mu_scale": 0.5, "t_local": 1, "rounds": 200}, analysis={"check_mu_bound": True})
    report = run_experiment(cfg).analysis
    assert report["dominance"]["violations"] == []
    assert report["descent_audit"]["violated_rounds"] == []
    assert report["corollary"]["mu_condition"]


@pytest.mark.slow
def test_large_step_audit_flags_most_seeds():
    flagged = 0
    for seed in range(10):
        cfg = run_config(seed=seed, train={"mu_scale": 10.0, "t_local": 5, "rounds": 3})
        flagged += bool(run_experiment(cfg).analysis["descent_audit"]["violated_rounds"])
    assert flagged >= 8
