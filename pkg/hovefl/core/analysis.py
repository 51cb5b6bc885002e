"""
Convergence-theory tooling: estimates of the smoothness, PL and gradient-variance
constants, evaluation of the convergence bound in two algebraic forms, the
convexity (corollary) check, and per-round audits of a recorded run.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Sequence

import numpy as np

from hovefl.core.models import Objective
from hovefl.core.numerics import RngStream, Vector, gaussian, norm
from hovefl.utilities.errors import BoundOverflowError, EstimationFailedError, MissingTraceError

if TYPE_CHECKING:
    from hovefl.core.federation import RoundRecord

log = logging.getLogger("hovefl")

# closed form has a removable singularity at L * mu == 1
SINGULAR_TOLERANCE = 1e-9
PL_MIN_GAP = 1e-10
F_STAR_MARGIN = 1e-9


class Provenance(str, Enum):
    ANALYTIC = "analytic"
    EMPIRICAL = "empirical"


class BoundForm(str, Enum):
    CLOSED_FORM = "closed_form"
    GEOMETRIC_SUM = "geometric_sum"


@dataclass(frozen=True)
class ConvergenceEstimates:
    """
    Constants of the convergence analysis.

    Attributes:
        L_hat (float): Lipschitz constant of the global gradient
        rho_hat (float): PL constant
        sigma_hat (float): bound on the dispersion of device gradients
        theta_hat (float): initial optimality gap F(m_G(0)) - F*
        f_star (float): (estimated) optimal global objective
        provenance (dict[str, Provenance]): how each field was obtained
    """
    L_hat: float
    rho_hat: float
    sigma_hat: float
    theta_hat: float
    f_star: float = 0.0
    provenance: dict[str, Provenance] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("L_hat", "rho_hat", "sigma_hat", "theta_hat"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.rho_hat > self.L_hat * (1 + 1e-12):
            raise ValueError(f"rho_hat ({self.rho_hat}) must not exceed L_hat ({self.L_hat})")

    def factor(self, mu: float) -> float:
        """Per-round contraction 2*rho*(L*mu^2 - mu) + 1."""
        return 2.0 * self.rho_hat * (self.L_hat * mu * mu - mu) + 1.0

    def to_dict(self) -> dict:
        return {
            "L_hat": self.L_hat,
            "rho_hat": self.rho_hat,
            "sigma_hat": self.sigma_hat,
            "theta_hat": self.theta_hat,
            "f_star": self.f_star,
            "provenance": {key: value.value for key, value in self.provenance.items()},
        }


@dataclass(frozen=True)
class BoundCurve:
    values: list[float]
    factor: float
    form: BoundForm
    requested_form: BoundForm
    mu: float
    mu_exceeds_inverse_L: bool

    @property
    def fell_back(self) -> bool:
        return self.form is not self.requested_form

    def to_dict(self) -> dict:
        return {
            "form": self.form.value,
            "requested_form": self.requested_form.value,
            "factor": self.factor,
            "mu": self.mu,
            "mu_exceeds_inverse_L": self.mu_exceeds_inverse_L,
            "values": self.values,
        }


# ---------------------------------------------------------------------------
# constant estimation
# ---------------------------------------------------------------------------

def _probe_points(dim: int, count: int, radius: float, rng: RngStream, center: Vector | None) -> np.ndarray:
    points = gaussian(rng, count * dim).reshape(count, dim) * radius
    if center is not None:
        points += center
    return points


def estimate_lipschitz(
    objective: Objective,
    probe_count: int,
    radius: float,
    rng: RngStream,
    center: Vector | None = None,
    safety_factor: float = 1.1,
) -> float:
    """
    Smoothness constant of the objective's gradient.

    Quadratic objectives return the exact largest Hessian eigenvalue. Otherwise
    probes center + radius * N(0, I) are drawn and the largest ratio
    ||g(a) - g(b)|| / ||a - b|| over all probe pairs, times `safety_factor`, is returned.
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    form = objective.quadratic_form()
    if form is not None:
        return max(float(form.eigenvalues[-1]), 0.0)

    points = _probe_points(objective.dim, probe_count, radius, rng, center)
    grads = np.stack([objective.gradient(p) for p in points])
    best = 0.0
    for i in range(probe_count - 1):
        dp = points[i + 1 :] - points[i]
        dg = grads[i + 1 :] - grads[i]
        dist = np.sqrt(np.einsum("ij,ij->i", dp, dp))
        ok = dist > 0
        if np.any(ok):
            ratios = np.sqrt(np.einsum("ij,ij->i", dg[ok], dg[ok])) / dist[ok]
            best = max(best, float(ratios.max()))
    return best * safety_factor


def estimate_pl(
    objective: Objective,
    f_star: float,
    probe_count: int,
    rng: RngStream,
    radius: float = 1.0,
    center: Vector | None = None,
) -> float:
    """
    PL constant: min over probes of ||grad F||^2 / (2 (F - F*)).

    Quadratic objectives return the exact smallest Hessian eigenvalue. Probes whose gap
    F - F* is below 1e-10 carry no information and are skipped.

    Raises:
        EstimationFailedError: if every probe is skipped
    """
    form = objective.quadratic_form()
    if form is not None:
        return max(float(form.eigenvalues[0]), 0.0)

    points = _probe_points(objective.dim, probe_count, radius, rng, center)
    best = math.inf
    for point in points:
        gap = objective.value(point) - f_star
        if gap < PL_MIN_GAP:
            continue
        g = norm(objective.gradient(point))
        best = min(best, g * g / (2.0 * gap))
    if best is math.inf:
        raise EstimationFailedError(
            f"all {probe_count} PL probes lie within {PL_MIN_GAP} of F*; widen the probe radius"
        )
    return best


def gradient_variance(device_grads: Sequence[Vector]) -> float:
    """sqrt(sum_n ||g_n - mean(g)||^2), the tightest dispersion bound at one point."""
    if len(device_grads) == 0:
        raise ValueError("need at least one device gradient")
    stacked = np.stack(device_grads)
    centered = stacked - stacked.mean(axis=0)
    return float(np.sqrt(np.sum(centered * centered)))


def reference_minimum(objective: Objective, start: Vector, L_hat: float, steps: int) -> float:
    """Best objective seen along full-gradient descent with step 1/L from `start`."""
    theta = np.array(start, dtype=np.float64)
    best = objective.value(theta)
    if L_hat <= 0 or steps == 0:
        return best
    for _ in range(steps):
        theta = theta - objective.gradient(theta) / L_hat
        value = objective.value(theta)
        if not math.isfinite(value):
            break
        best = min(best, value)
    return best


def estimate_constants(
    objective: Objective,
    history: Sequence[RoundRecord],
    initial_theta: Vector,
    rng: RngStream,
    probe_count: int = 64,
    probe_radius: float = 1.0,
    lipschitz_safety: float = 1.1,
    reference_steps: int = 2000,
    L_hat: float | None = None,
    logger: logging.Logger | None = None,
) -> ConvergenceEstimates:
    """
    Estimate (L, rho, sigma, Theta, F*) for a recorded run.

    Quadratic objectives get exact L, rho and F*. Otherwise F* is the smallest objective
    seen in the history or along a reference descent run, minus 1e-9, and L / rho come
    from random probes around the initial model. sigma is the largest per-round value.
    """
    logger = logger or log
    form = objective.quadratic_form()
    if L_hat is None:
        L_hat = estimate_lipschitz(
            objective, probe_count, probe_radius, rng.child(0), initial_theta, lipschitz_safety
        )
    initial_value = history[0].objective_before if history else objective.value(initial_theta)

    if form is not None:
        f_star = objective.value(form.minimizer())
        rho_hat = estimate_pl(objective, f_star, probe_count, rng.child(1))
        kind = Provenance.ANALYTIC
    else:
        observed = min([initial_value, *(record.objective for record in history)])
        f_star = min(observed, reference_minimum(objective, initial_theta, L_hat, reference_steps))
        f_star -= F_STAR_MARGIN
        rho_hat = estimate_pl(objective, f_star, probe_count, rng.child(1), probe_radius, initial_theta)
        kind = Provenance.EMPIRICAL
        if rho_hat > L_hat:
            logger.warning(f"PL estimate {rho_hat:.3e} exceeds L estimate {L_hat:.3e}; clamping to L")
            rho_hat = L_hat

    if history:
        sigma_hat = max(record.sigma_hat for record in history)
    else:
        sigma_hat = gradient_variance(_device_gradients(objective, initial_theta))
    return ConvergenceEstimates(
        L_hat=L_hat,
        rho_hat=rho_hat,
        sigma_hat=sigma_hat,
        theta_hat=max(initial_value - f_star, 0.0),
        f_star=f_star,
        provenance={
            "L_hat": kind,
            "rho_hat": kind,
            "f_star": kind,
            "theta_hat": kind,
            "sigma_hat": Provenance.EMPIRICAL,
        },
    )


def _device_gradients(objective: Objective, theta: Vector) -> list[Vector]:
    if hasattr(objective, "device_gradients"):
        return objective.device_gradients(theta)
    return [objective.gradient(theta)]


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------

def _geometric_sum(q: float, t: int) -> float:
    """sum_{i=1}^{t} q^(i-1)"""
    if q == 1.0:
        return float(t)
    return (q**t - 1.0) / (q - 1.0)


def _closed_form(est: ConvergenceEstimates, mu: float, t: int, shift: int = 1) -> float:
    q = est.factor(mu)
    lm = est.L_hat * mu
    return q**t * est.theta_hat + lm * est.sigma_hat**2 * (q ** (t + shift) - 1.0) / (lm - 1.0)


def _geometric_form(est: ConvergenceEstimates, mu: float, t: int) -> float:
    q = est.factor(mu)
    drift = 2.0 * est.rho_hat * est.L_hat * mu * mu * est.sigma_hat**2
    return q**t * est.theta_hat + drift * _geometric_sum(q, t)


def bound_curve(
    est: ConvergenceEstimates, mu: float, T: int, form: BoundForm = BoundForm.GEOMETRIC_SUM
) -> BoundCurve:
    """
    Bound B(t) on F(m_G(t)) - F* for t = 0..T.

    GEOMETRIC_SUM: Theta q^t + 2 rho L mu^2 sigma^2 sum_{i=1}^{t} q^(i-1)
    CLOSED_FORM:   Theta q^t + L mu sigma^2 (q^(t+1) - 1) / (L mu - 1)
    with q = 2 rho (L mu^2 - mu) + 1. The closed form is replaced by the geometric sum
    when |L mu - 1| < 1e-9.

    Raises:
        BoundOverflowError: if some B(t) is not finite
    """
    if not mu > 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    if T < 0:
        raise ValueError("T must be >= 0")
    form = BoundForm(form)
    used = form
    if form is BoundForm.CLOSED_FORM and abs(est.L_hat * mu - 1.0) < SINGULAR_TOLERANCE:
        used = BoundForm.GEOMETRIC_SUM
    evaluate = _geometric_form if used is BoundForm.GEOMETRIC_SUM else _closed_form
    values = []
    with np.errstate(over="ignore"):
        for t in range(T + 1):
            try:
                value = evaluate(est, mu, t)
            except OverflowError:
                raise BoundOverflowError(t) from None
            if not math.isfinite(value):
                raise BoundOverflowError(t)
            values.append(value)
    return BoundCurve(
        values=values,
        factor=est.factor(mu),
        form=used,
        requested_form=form,
        mu=mu,
        mu_exceeds_inverse_L=est.L_hat * mu > 1.0,
    )


def gradient_norm_curve(est: ConvergenceEstimates, mu: float, T: int, g0_sq: float) -> list[float]:
    """Recurrence bound on ||grad F(m_G(t))||^2 for t = 0..T."""
    q = est.factor(mu)
    drift = 2.0 * est.rho_hat * est.L_hat * mu * mu * est.sigma_hat**2
    values = []
    for t in range(T + 1):
        try:
            value = q**t * g0_sq + drift * _geometric_sum(q, t)
        except OverflowError:
            raise BoundOverflowError(t) from None
        if not math.isfinite(value):
            raise BoundOverflowError(t)
        values.append(value)
    return values


def compare_bound_forms(est: ConvergenceEstimates, mu: float, T: int) -> dict:
    """
    Discrepancy between the closed form and the geometric sum over t = 0..T.

    `shifted_residual` compares the geometric sum with the closed form evaluated with
    exponent t instead of t + 1; it vanishes to rounding unless L mu is near 1.
    """
    singular = abs(est.L_hat * mu - 1.0) < SINGULAR_TOLERANCE
    report = {"singular": singular, "max_abs_discrepancy": None, "max_rel_discrepancy": None, "shifted_residual": None}
    if singular:
        return report
    geometric = bound_curve(est, mu, T, BoundForm.GEOMETRIC_SUM).values
    closed = bound_curve(est, mu, T, BoundForm.CLOSED_FORM).values
    shifted = [_closed_form(est, mu, t, shift=0) for t in range(T + 1)]
    scale = [max(abs(g), 1e-300) for g in geometric]
    report["max_abs_discrepancy"] = max(abs(c - g) for c, g in zip(closed, geometric))
    report["max_rel_discrepancy"] = max(abs(c - g) / s for c, g, s in zip(closed, geometric, scale))
    report["shifted_residual"] = max(abs(c - g) / s for c, g, s in zip(shifted, geometric, scale))
    return report


@dataclass(frozen=True)
class CorollaryReport:
    """
    Convexity of the bound in the number of rounds.

    `theta_threshold` is the stated condition (exactly the closed form's convexity
    condition); `geometric_threshold` is the stricter one for the geometric sum.
    `numerically_convex` is None when mu > 1/L (no claim is made).
    """
    mu_condition: bool
    theta_threshold: float | None
    theta_condition: bool
    geometric_threshold: float | None
    geometric_condition: bool
    numerically_convex: bool | None
    min_second_difference: float | None
    scanned_form: BoundForm

    @property
    def conditions_hold(self) -> bool:
        return self.mu_condition and self.theta_condition

    def to_dict(self) -> dict:
        return {
            "mu_condition": self.mu_condition,
            "theta_threshold": self.theta_threshold,
            "theta_condition": self.theta_condition,
            "geometric_threshold": self.geometric_threshold,
            "geometric_condition": self.geometric_condition,
            "numerically_convex": self.numerically_convex,
            "min_second_difference": self.min_second_difference,
            "scanned_form": self.scanned_form.value,
        }


def _threshold(numerator: float, lm: float) -> float | None:
    if numerator == 0:
        return 0.0
    if lm >= 1.0:
        return None
    return numerator / (1.0 - lm)


def check_corollary1(
    est: ConvergenceEstimates, mu: float, T: int = 200, tolerance: float = 1e-12
) -> CorollaryReport:
    """
    Check the conditions under which the bound is convex in t, and scan second
    differences B(t+1) - 2B(t) + B(t-1) for t in 1..T-1.
    """
    lm = est.L_hat * mu
    q = est.factor(mu)
    sigma_sq = est.sigma_hat**2
    mu_condition = lm <= 1.0
    theta_threshold = _threshold(q * lm * sigma_sq, lm)
    geometric_threshold = _threshold(lm * sigma_sq, lm)
    theta_condition = theta_threshold is not None and est.theta_hat >= theta_threshold
    geometric_condition = geometric_threshold is not None and est.theta_hat >= geometric_threshold

    if not mu_condition:
        return CorollaryReport(
            False, theta_threshold, theta_condition, geometric_threshold, geometric_condition,
            None, None, BoundForm.CLOSED_FORM,
        )
    curve = bound_curve(est, mu, T, BoundForm.CLOSED_FORM)
    values = curve.values
    seconds = [values[t + 1] - 2.0 * values[t] + values[t - 1] for t in range(1, T)]
    scale = max(1.0, max(abs(v) for v in values))
    lowest = min(seconds) if seconds else None
    convex = lowest is None or lowest >= -tolerance * scale
    return CorollaryReport(
        True, theta_threshold, theta_condition, geometric_threshold, geometric_condition,
        convex, lowest, curve.form,
    )


# ---------------------------------------------------------------------------
# run audits
# ---------------------------------------------------------------------------

def _require(record: RoundRecord, name: str) -> float:
    value = getattr(record, name, None)
    if value is None:
        raise MissingTraceError(getattr(record, "round", -1), name)
    return float(value)


@dataclass(frozen=True)
class AuditRow:
    round: int
    lhs: float
    rhs: float
    violated: bool

    def to_dict(self) -> dict:
        return {"round": self.round, "lhs": self.lhs, "rhs": self.rhs, "violated": self.violated}


@dataclass(frozen=True)
class DescentAudit:
    rows: list[AuditRow]

    @property
    def violations(self) -> list[int]:
        return [row.round for row in self.rows if row.violated]

    def to_dict(self) -> dict:
        return {"violated_rounds": self.violations, "rounds": [row.to_dict() for row in self.rows]}


def audit_descent(
    history: Sequence[RoundRecord], est: ConvergenceEstimates, mu: float, tolerance: float = 1e-9
) -> DescentAudit:
    """
    Check F(t+1) <= F(t) - mu g^2 + (L mu^2 / 2)(g + sigma_t)^2 for every round, with g
    and sigma_t measured at the broadcast point. A round is flagged when the left side
    exceeds the right by more than tolerance * max(1, |F(t)|). Flags are reported, not raised.

    Raises:
        MissingTraceError: if a record lacks an objective or gradient trace
    """
    rows = []
    for record in history:
        before = _require(record, "objective_before")
        after = _require(record, "objective")
        g = _require(record, "grad_norm")
        sigma = _require(record, "sigma_hat")
        rhs = before - mu * g * g + 0.5 * est.L_hat * mu * mu * (g + sigma) ** 2
        violated = after - rhs > tolerance * max(1.0, abs(before))
        rows.append(AuditRow(record.round, after, rhs, bool(violated)))
    return DescentAudit(rows)


@dataclass(frozen=True)
class DominanceReport:
    """Empirical optimality gaps against the bound, t = 0..T."""
    gaps: list[float]
    bound: BoundCurve
    margins: list[float]
    violations: list[int]
    grad_sq: list[float]
    grad_sq_bound: list[float]
    grad_exceedances: list[int]

    def to_dict(self) -> dict:
        return {
            "violations": self.violations,
            "gaps": self.gaps,
            "margins": self.margins,
            "gradient_norm_sq": self.grad_sq,
            "gradient_norm_sq_bound": self.grad_sq_bound,
            "gradient_bound_exceedances": self.grad_exceedances,
        }


def bound_vs_run(
    history: Sequence[RoundRecord],
    est: ConvergenceEstimates,
    mu: float,
    form: BoundForm = BoundForm.GEOMETRIC_SUM,
    tolerance: float = 1e-12,
) -> DominanceReport:
    """
    Check F(m_G(t)) - F* <= B(t) for t = 0..T; also compare measured squared gradient
    norms with the gradient recurrence bound (reported only).
    """
    if not history:
        raise MissingTraceError(0, "objective")
    gaps = [_require(history[0], "objective_before") - est.f_star]
    gaps += [_require(record, "objective") - est.f_star for record in history]
    curve = bound_curve(est, mu, len(history), form)
    slack = tolerance * max(1.0, abs(est.f_star))
    margins = [b - g for b, g in zip(curve.values, gaps)]
    violations = [t for t, margin in enumerate(margins) if margin < -slack]

    grad_sq = [_require(record, "grad_norm") ** 2 for record in history]
    grad_bound = gradient_norm_curve(est, mu, len(history) - 1, grad_sq[0])
    exceedances = [t for t, (g, b) in enumerate(zip(grad_sq, grad_bound)) if g > b + slack]
    return DominanceReport(gaps, curve, margins, violations, grad_sq, grad_bound, exceedances)
