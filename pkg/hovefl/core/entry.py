"""
Experiment pipelines behind the command line: single runs and paired device-mix
comparisons.
"""
from __future__ import annotations

import logging
import traceback
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from hovefl.core.analysis import (
    BoundForm,
    ConvergenceEstimates,
    audit_descent,
    bound_vs_run,
    check_corollary1,
    compare_bound_forms,
    estimate_constants,
    estimate_lipschitz,
)
from hovefl.core.data import (
    CsvSchema,
    Dataset,
    TaskKind,
    Topology,
    build_topology,
    generate_classification,
    generate_regression,
    load_csv,
    split_train_test,
)
from hovefl.core.federation import FederationState, RoundRecord, build_state, run_federation
from hovefl.core.models import ModelKind, ModelParams, ParamLayout
from hovefl.core.numerics import STREAM_PARTITION, STREAM_PROBE, STREAM_SPLIT, RngStream
from hovefl.utilities.config import ComparisonSpec, DatasetSpec, ExperimentConfig, echo
from hovefl.utilities.errors import BoundOverflowError, ConfigError, DivergenceError
from hovefl.utilities.logger import clean_logger, setup_logger
from hovefl.utilities.utils import format_float, lock, prepare_workspace, write_csv, write_json

HISTORY_HEADER = ("round", "train_loss", "test_loss", "grad_norm", "sigma_hat")
BOUND_HEADER = ("t", "bound", "empirical_gap")

log = logging.getLogger("hovefl")


@dataclass(eq=False)
class Experiment:
    config: ExperimentConfig
    train: Dataset
    test: Dataset | None
    layout: ParamLayout
    topology: Topology
    state: FederationState
    mu: float
    L_hat: float | None = None

    @property
    def initial_params(self) -> ModelParams:
        return self.state.model.params


@dataclass(eq=False)
class RunOutcome:
    experiment: Experiment
    history: list[RoundRecord]
    final_state: FederationState
    estimates: ConvergenceEstimates | None = None
    analysis: dict = field(default_factory=dict)
    bound_rows: list[tuple] = field(default_factory=list)

    @property
    def final_test_loss(self) -> float | None:
        return self.history[-1].test_loss if self.history else None

    @property
    def final_train_loss(self) -> float | None:
        return self.history[-1].train_loss if self.history else None


def load_dataset(spec: DatasetSpec, seed: int) -> Dataset:
    if spec.kind == "regression":
        return generate_regression(spec.n_samples, spec.n_features, spec.noise_std, seed)
    if spec.kind == "classification":
        return generate_classification(spec.n_samples, spec.n_features, spec.n_classes, spec.cluster_sep, seed)
    schema = spec.csv_schema
    return load_csv(
        spec.path,
        CsvSchema(
            feature_columns=list(schema.feature_columns),
            label_column=schema.label_column,
            task_kind=TaskKind(schema.task_kind),
            n_classes=schema.n_classes,
            id_column=schema.id_column,
        ),
    )


def prepare_experiment(cfg: ExperimentConfig, logger: logging.Logger | None = None) -> Experiment:
    """
    Load data, split it, build the topology and the initial federation state, and
    resolve the learning rate.

    Raises:
        ConfigError: if `mu_scale` cannot be resolved or mu violates `check_mu_bound`
    """
    logger = logger or log
    dataset = load_dataset(cfg.dataset, cfg.seed)
    train, test = split_train_test(dataset, cfg.dataset.test_fraction, RngStream(cfg.seed, STREAM_SPLIT))
    layout = ParamLayout.for_dataset(ModelKind(cfg.model.kind), train, cfg.model.hidden_width)
    topo = cfg.topology
    topology = build_topology(
        train,
        topo.n_horizontal,
        topo.n_vertical,
        {"dirichlet_beta": topo.dirichlet_beta, "min_per_device": topo.min_per_device},
        {"overlap_fraction": topo.overlap_fraction, "shuffle_features": topo.shuffle_features},
        layout,
        RngStream(cfg.seed, STREAM_PARTITION),
        pool_ratio=topo.pool_ratio,
    )
    state = build_state(topology, train, test, layout, cfg.train, cfg.seed)
    logger.info(
        f"dataset: {train.n_samples} train / {test.n_samples if test is not None else 0} test samples, "
        f"{train.n_features} features; model {layout.model_kind.value} with {layout.dim} parameters"
    )
    logger.info(f"topology: {topology.summary()}")

    mu, L_hat = cfg.train.mu, None
    analysis = cfg.analysis
    if cfg.train.mu_scale is not None or analysis.check_mu_bound:
        L_hat = estimate_lipschitz(
            state.objective,
            analysis.probe_count,
            analysis.probe_radius,
            RngStream(cfg.seed, STREAM_PROBE).child(0),
            state.model.params.theta,
            analysis.lipschitz_safety,
        )
        if not L_hat > 0:
            raise ConfigError("the objective is flat around the initial model; set mu directly", field="train.mu_scale")
    if cfg.train.mu_scale is not None:
        mu = cfg.train.mu_scale / L_hat
        logger.info(f"mu = {cfg.train.mu_scale} / L_hat = {mu:.6e}")
    if analysis.check_mu_bound and mu * L_hat > 1.0 + 1e-12:
        raise ConfigError(f"mu={mu:.6e} exceeds 1/L_hat={1.0 / L_hat:.6e}", field="train.mu")
    return Experiment(cfg, train, test, layout, topology, state, mu, L_hat)


def analyze(experiment: Experiment, history: list[RoundRecord], logger: logging.Logger | None = None):
    """Estimate constants and check the recorded run against the bound and descent audit."""
    logger = logger or log
    cfg, mu = experiment.config.analysis, experiment.mu
    estimates = estimate_constants(
        experiment.state.objective,
        history,
        experiment.initial_params.theta,
        RngStream(experiment.config.seed, STREAM_PROBE),
        probe_count=cfg.probe_count,
        probe_radius=cfg.probe_radius,
        lipschitz_safety=cfg.lipschitz_safety,
        reference_steps=cfg.reference_steps,
        L_hat=experiment.L_hat,
        logger=logger,
    )
    logger.info(
        f"estimates: L={estimates.L_hat:.6e} rho={estimates.rho_hat:.6e} "
        f"sigma={estimates.sigma_hat:.6e} Theta={estimates.theta_hat:.6e}"
    )
    report = {
        "enabled": True,
        "mu": mu,
        "estimates": estimates.to_dict(),
        "sigma_per_round": [record.sigma_hat for record in history],
        "descent_audit": audit_descent(history, estimates, mu).to_dict(),
        "corollary": check_corollary1(estimates, mu, cfg.corollary_horizon).to_dict(),
    }
    bound_rows = []
    try:
        dominance = bound_vs_run(history, estimates, mu, BoundForm(cfg.bound_form))
        report["bound"] = dominance.bound.to_dict()
        report["dominance"] = dominance.to_dict()
        report["bound_forms"] = compare_bound_forms(estimates, mu, len(history))
        bound_rows = [(t, b, g) for t, (b, g) in enumerate(zip(dominance.bound.values, dominance.gaps))]
        if dominance.bound.mu_exceeds_inverse_L:
            logger.warning(f"mu={mu:.3e} exceeds 1/L_hat; the bound is outside its validity regime")
        if dominance.violations:
            logger.warning(f"bound violated at t={dominance.violations}")
    except BoundOverflowError as e:
        logger.warning(str(e))
        report["bound"] = {"error": str(e)}
    violated = report["descent_audit"]["violated_rounds"]
    if violated:
        logger.warning(f"descent inequality flagged in {len(violated)} round(s): {violated[:10]}")
    return estimates, report, bound_rows


def run_experiment(cfg: ExperimentConfig, logger: logging.Logger | None = None) -> RunOutcome:
    """Prepare, train for `cfg.train.rounds` rounds and (optionally) analyse."""
    logger = logger or log
    experiment = prepare_experiment(cfg, logger)
    train_cfg = cfg.train.model_copy(update={"mu": experiment.mu})
    final_state, history = run_federation(experiment.state, train_cfg, logger)
    outcome = RunOutcome(experiment, history, final_state)
    if cfg.analysis.enabled:
        outcome.estimates, outcome.analysis, outcome.bound_rows = analyze(experiment, history, logger)
    else:
        outcome.analysis = {
            "enabled": False,
            "mu": experiment.mu,
            "sigma_per_round": [record.sigma_hat for record in history],
        }
    return outcome


def write_run(outcome: RunOutcome, directory: Path) -> None:
    """Write history.csv, analysis.json, config_echo.json, shards.json (and bound.csv)."""
    directory.mkdir(parents=True, exist_ok=True)
    write_csv(directory / "history.csv", HISTORY_HEADER, (record.history_row() for record in outcome.history))
    write_json(directory / "analysis.json", outcome.analysis)
    (directory / "config_echo.json").write_text(echo(outcome.experiment.config), encoding="utf-8")
    (directory / "shards.json").write_text(outcome.experiment.topology.dump_shards() + "\n", encoding="utf-8")
    if outcome.bound_rows:
        write_csv(directory / "bound.csv", BOUND_HEADER, outcome.bound_rows)


def run(cfg: ExperimentConfig, printing: bool = True) -> RunOutcome:
    """
    Execute one experiment into `cfg.output_dir`.

    Results are staged and moved into place only on success; a failing run leaves the
    output directory untouched.
    """
    workspace = prepare_workspace(cfg.output_dir, cfg.overwrite, f"hovefl.run.{id(cfg)}", printing)
    logger = workspace.logger
    try:
        outcome = run_experiment(cfg, logger)
        write_run(outcome, workspace.staging_dir)
        logger.info(f"results written to {cfg.output_dir}")
        workspace.commit()
    except BaseException:
        workspace.cleanup()
        raise
    return outcome


# ---------------------------------------------------------------------------
# device-mix comparisons
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ComparisonOutcome:
    spec: ComparisonSpec
    finals: dict[str, dict[int, float]]
    failures: list[tuple[str, str, str]]
    summary: list[dict]
    statements: list[str]

    @property
    def diverged(self) -> bool:
        return any(status == "divergence" for status, _, _ in self.failures)


def _mean_sd(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.array(values, dtype=np.float64)
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else None
    return float(arr.mean()), sd


def _cell(value: float | None) -> str:
    return "NA" if value is None else format_float(value)


def compare_job(spec: ComparisonSpec, label: str, seed: int, root: Path, outcomes: dict):
    """
    Run one (arm, seed) pair into `root/<label>/seed_<seed>`.

    Returns:
        tuple: (status, key, error) with status "success", "divergence" or "fail"
    """
    key = f"{label}/seed_{seed}"
    arm = next(a for a in spec.arms if a.label == label)
    directory = root / label / f"seed_{seed}"
    logger = setup_logger(f"hovefl.compare.{id(outcomes)}.{label}.{seed}", directory / "run.log", printing=False)
    try:
        outcome = run_experiment(spec.arm_config(arm, seed), logger)
        write_run(outcome, directory)
        with lock:
            outcomes[(label, seed)] = outcome
        return "success", key, None
    except DivergenceError as e:
        logger.error(str(e))
        return "divergence", key, str(e)
    except Exception as e:
        logger.error(traceback.format_exc())
        return "fail", key, str(e)
    finally:
        clean_logger(logger)


def summarize(spec: ComparisonSpec, outcomes: dict) -> tuple[list[dict], list[str], dict]:
    reference = spec.arms[0].label
    finals = {
        arm.label: {seed: outcomes[(arm.label, seed)].final_test_loss for seed in spec.seeds if (arm.label, seed) in outcomes}
        for arm in spec.arms
    }
    ref_mean, _ = _mean_sd(list(finals[reference].values()))
    summary, statements = [], []
    for arm in spec.arms:
        runs = [outcomes[(arm.label, seed)] for seed in spec.seeds if (arm.label, seed) in outcomes]
        test_mean, test_sd = _mean_sd([run.final_test_loss for run in runs])
        train_mean, train_sd = _mean_sd([run.final_train_loss for run in runs])
        topology = spec.arm_config(arm, spec.seeds[0]).topology
        paired = [s for s in finals[arm.label] if s in finals[reference]]
        not_worse = sum(finals[arm.label][s] <= finals[reference][s] for s in paired)
        relative = None
        if arm.label != reference and test_mean is not None and ref_mean:
            relative = (test_mean - ref_mean) / abs(ref_mean) * 100.0
            direction = "higher" if relative > 0 else "lower"
            statements.append(
                f"{arm.label}: final test loss is {abs(relative):.1f}% {direction} than {reference} "
                f"(not worse in {not_worse}/{len(paired)} paired seeds)"
            )
        summary.append(
            {
                "label": arm.label,
                "n_horizontal": topology.n_horizontal,
                "n_vertical": topology.n_vertical,
                "n_seeds": len(runs),
                "final_train_loss_mean": train_mean,
                "final_train_loss_sd": train_sd,
                "final_test_loss_mean": test_mean,
                "final_test_loss_sd": test_sd,
                "relative_to_reference_pct": relative,
                "not_worse_than_reference": not_worse,
                "paired_seeds": len(paired),
            }
        )
    return summary, statements, finals


def _write_curves(spec: ComparisonSpec, outcomes: dict, root: Path) -> None:
    for arm in spec.arms:
        runs = [outcomes[(arm.label, seed)] for seed in spec.seeds if (arm.label, seed) in outcomes]
        rows = []
        for index in range(max((len(run.history) for run in runs), default=0)):
            records = [run.history[index] for run in runs if index < len(run.history)]
            train = _mean_sd([r.train_loss for r in records])
            test = _mean_sd([r.test_loss for r in records if r.test_loss is not None])
            rows.append((records[0].round, *map(_cell, train), *map(_cell, test)))
        write_csv(
            root / f"curves_{arm.label}.csv",
            ("round", "train_loss_mean", "train_loss_sd", "test_loss_mean", "test_loss_sd"),
            rows,
        )


def compare(spec: ComparisonSpec, printing: bool = True) -> ComparisonOutcome:
    """
    Run every (arm, seed) pair with paired seeds and summarise final test losses
    against the first arm.
    """
    console = Console(quiet=not printing)
    workspace = prepare_workspace(spec.output_dir, spec.overwrite, f"hovefl.compare.{id(spec)}", printing)
    logger = workspace.logger
    outcomes: dict = {}
    failures: list[tuple[str, str, str]] = []
    jobs = [(arm.label, seed) for arm in spec.arms for seed in spec.seeds]
    try:
        console.rule("[bold green] Starting device-mix comparison...")
        with Progress(
            SpinnerColumn(),
            TextColumn("[green]Success: {task.fields[success]}[/green] | [red]Fail: {task.fields[fail]}[/red]"),
            BarColumn(),
            TextColumn(f"Total: {len(jobs)}"),
            "[progress.percentage]{task.percentage:>3.0f}%",
            TimeElapsedColumn(),
            console=console,
        ) as progress:
            task = progress.add_task(f"Running {len(jobs)} runs", total=len(jobs), success=0, fail=0)
            with ThreadPoolExecutor(max_workers=spec.max_workers) as executor:
                futures = {
                    executor.submit(compare_job, spec, label, seed, workspace.staging_dir, outcomes): (label, seed)
                    for label, seed in jobs
                }
                for future in as_completed(futures):
                    status, key, error = future.result()
                    if status == "success":
                        progress.update(task, success=progress.tasks[0].fields["success"] + 1)
                    else:
                        failures.append((status, key, error))
                        progress.update(task, fail=progress.tasks[0].fields["fail"] + 1)
                        console.print(f"[red]Failed[/red] {key}: {error}")
                        logger.error(f"{key}: {error}")
                    progress.update(task, advance=1)

        summary, statements, finals = summarize(spec, outcomes)
        write_csv(
            workspace.path("summary.csv"),
            tuple(summary[0].keys()),
            ([_cell(v) if isinstance(v, float) or v is None else v for v in row.values()] for row in summary),
        )
        _write_curves(spec, outcomes, workspace.staging_dir)
        write_json(
            workspace.path("comparison.json"),
            {
                "reference": spec.arms[0].label,
                "seeds": spec.seeds,
                "summary": summary,
                "final_test_loss": {label: {str(s): v for s, v in per_seed.items()} for label, per_seed in finals.items()},
                "statements": statements,
                "failures": [{"status": s, "run": k, "error": e} for s, k, e in failures],
            },
        )
        (workspace.path("spec_echo.json")).write_text(echo(spec), encoding="utf-8")

        table = Table(title="final test loss")
        for column in ("arm", "H", "V", "seeds", "mean", "sd", "vs reference"):
            table.add_column(column)
        for row in summary:
            table.add_row(
                row["label"], str(row["n_horizontal"]), str(row["n_vertical"]), str(row["n_seeds"]),
                _cell(row["final_test_loss_mean"]), _cell(row["final_test_loss_sd"]),
                "-" if row["relative_to_reference_pct"] is None else f"{row['relative_to_reference_pct']:+.1f}%",
            )
        console.print(table)
        for statement in statements:
            console.print(statement)
            logger.info(statement)
        console.rule("[bold green] Finished comparison!")
        workspace.commit()
    except BaseException:
        workspace.cleanup()
        raise
    return ComparisonOutcome(spec, finals, failures, summary, statements)
