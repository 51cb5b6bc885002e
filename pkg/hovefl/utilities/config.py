"""
Configuration models for experiment runs and device-mix comparisons.

Configs are JSON files validated with pydantic; unknown keys are rejected and every
default is explicit, so `model_dump` gives the complete effective configuration.
"""
from __future__ import annotations

import json
import re
from enum import Enum
from pathlib import Path
from typing import Annotated, Literal, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from hovefl.utilities.errors import ConfigError


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class WeightScheme(str, Enum):
    SAMPLE_PROPORTIONAL = "sample_proportional"
    UNIFORM = "uniform"


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class CsvSchemaSpec(StrictModel):
    feature_columns: list[str] = Field(min_length=1)
    label_column: str
    task_kind: Literal["regression", "binary_classification", "multiclass"] = "regression"
    n_classes: int | None = Field(default=None, ge=2)
    id_column: str | None = None


class DatasetSpec(StrictModel):
    """
    Synthetic generator settings, or a CSV file plus its schema.

    Attributes:
        kind: "regression" / "classification" generators, or "csv"
        test_fraction: share of rows held out for test losses
    """
    kind: Literal["regression", "classification", "csv"] = "regression"
    n_samples: int = Field(default=400, ge=2)
    n_features: int = Field(default=6, ge=1)
    noise_std: float = Field(default=0.1, ge=0)
    n_classes: int = Field(default=2, ge=2)
    cluster_sep: float = Field(default=2.0, gt=0)
    path: str | None = None
    csv_schema: CsvSchemaSpec | None = None
    test_fraction: float = Field(default=0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def _csv_needs_source(self):
        if self.kind == "csv" and (self.path is None or self.csv_schema is None):
            raise ValueError("csv datasets need both 'path' and 'csv_schema'")
        return self

    @property
    def is_regression(self) -> bool:
        if self.kind == "csv":
            return self.csv_schema.task_kind == "regression"
        return self.kind == "regression"


class TopologySpec(StrictModel):
    n_horizontal: int = Field(default=4, ge=0)
    n_vertical: int = Field(default=2, ge=0)
    dirichlet_beta: float = Field(default=0.5, gt=0)
    min_per_device: int = Field(default=2, ge=1)
    overlap_fraction: float = Field(default=0.0, ge=0, lt=1)
    pool_ratio: float = Field(default=0.5, gt=0, lt=1)
    shuffle_features: bool = False

    @model_validator(mode="after")
    def _at_least_one_device(self):
        if self.n_horizontal + self.n_vertical < 1:
            raise ValueError("n_horizontal + n_vertical must be >= 1")
        return self


class ModelSpec(StrictModel):
    kind: Literal["ridge", "logistic", "mlp"] = "ridge"
    hidden_width: int = Field(default=16, ge=1)


class OptimizerSpec(StrictModel):
    kind: OptimizerKind = OptimizerKind.SGD
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class TrainConfig(StrictModel):
    """
    Round protocol settings.

    Attributes:
        mu: learning rate, > 0
        t_local: local optimizer steps per round (T_L)
        rounds: communication rounds (T)
        alpha: regularizer weight in [0, 1]
        batch_size: mini-batch size or "full"
        mu_scale: if set, mu is replaced by mu_scale / L_hat measured at the initial model
        max_workers: threads used to train devices within a round
    """
    mu: float = Field(default=0.05, gt=0)
    t_local: int = Field(default=1, ge=1)
    rounds: int = Field(default=50, ge=1)
    alpha: float = Field(default=0.01, ge=0, le=1)
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    batch_size: Annotated[int, Field(ge=1)] | Literal["full"] = "full"
    weight_scheme: WeightScheme = WeightScheme.SAMPLE_PROPORTIONAL
    init: Literal["zeros", "gaussian"] = "zeros"
    init_scale: float = Field(default=0.01, ge=0)
    mu_scale: float | None = Field(default=None, gt=0)
    max_workers: int = Field(default=1, ge=1)


class AnalysisSpec(StrictModel):
    enabled: bool = True
    bound_form: Literal["geometric_sum", "closed_form"] = "geometric_sum"
    probe_count: int = Field(default=64, ge=2)
    probe_radius: float = Field(default=1.0, gt=0)
    lipschitz_safety: float = Field(default=1.1, ge=1)
    reference_steps: int = Field(default=2000, ge=0)
    check_mu_bound: bool = False
    corollary_horizon: int = Field(default=200, ge=2)


class ExperimentConfig(StrictModel):
    seed: int = Field(default=0, ge=0)
    output_dir: str = "results/run"
    overwrite: bool = False
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    topology: TopologySpec = Field(default_factory=TopologySpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    analysis: AnalysisSpec = Field(default_factory=AnalysisSpec)

    @model_validator(mode="after")
    def _model_fits_task(self):
        if (self.model.kind == "ridge") != self.dataset.is_regression:
            raise ValueError(
                f"model kind '{self.model.kind}' does not fit a "
                f"{'regression' if self.dataset.is_regression else 'classification'} dataset"
            )
        return self


class TopologyOverrides(StrictModel):
    n_horizontal: int | None = Field(default=None, ge=0)
    n_vertical: int | None = Field(default=None, ge=0)
    dirichlet_beta: float | None = Field(default=None, gt=0)
    min_per_device: int | None = Field(default=None, ge=1)
    overlap_fraction: float | None = Field(default=None, ge=0, lt=1)
    pool_ratio: float | None = Field(default=None, gt=0, lt=1)
    shuffle_features: bool | None = None


class ArmSpec(StrictModel):
    label: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    topology: TopologyOverrides = Field(default_factory=TopologyOverrides)


class ComparisonSpec(StrictModel):
    """Arms share the base config (dataset, model, training) and are run on paired seeds."""
    base: ExperimentConfig = Field(default_factory=ExperimentConfig)
    arms: list[ArmSpec] = Field(min_length=2)
    seeds: list[Annotated[int, Field(ge=0)]] = Field(default_factory=lambda: list(range(10)), min_length=1)
    output_dir: str = "results/compare"
    overwrite: bool = False
    max_workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _unique(self):
        labels = [arm.label for arm in self.arms]
        if len(set(labels)) != len(labels):
            raise ValueError("arm labels must be unique")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be unique")
        return self

    def arm_config(self, arm: ArmSpec, seed: int) -> ExperimentConfig:
        """Base config with the arm's topology overrides applied, for one seed."""
        topology = {
            **self.base.topology.model_dump(),
            **arm.topology.model_dump(exclude_none=True),
        }
        payload = {**self.base.model_dump(mode="json"), "topology": topology, "seed": seed}
        return validate(ExperimentConfig, payload, prefix=f"arms.{arm.label}")


Model = TypeVar("Model", bound=BaseModel)


def _locate(text: str, loc: tuple) -> int | None:
    """Line of the deepest key of `loc` found in the JSON text."""
    pos, line = 0, None
    for key in loc:
        if not isinstance(key, str):
            continue
        match = re.compile(rf'"{re.escape(key)}"\s*:').search(text, pos)
        if match is None:
            break
        pos = match.start()
        line = text.count("\n", 0, pos) + 1
    return line


def validate(model: type[Model], payload: dict, text: str | None = None, prefix: str | None = None) -> Model:
    """
    Validate `payload` against `model`.

    Raises:
        ConfigError: naming the dotted field path (and its line when `text` is given)
    """
    try:
        return model.model_validate(payload)
    except ValidationError as e:
        error = e.errors()[0]
        loc = tuple(error["loc"])
        path = ".".join(str(key) for key in loc) or None
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        line = _locate(text, loc) if text is not None else None
        raise ConfigError(error["msg"], field=path, line=line) from None


def _load(path: str | Path, model: type[Model]) -> Model:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e.strerror}") from None
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", line=e.lineno) from None
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object", line=1)
    return validate(model, payload, text)


def load_config(config_path: str | Path) -> ExperimentConfig:
    """
    Load and validate a run configuration from a JSON file.

    Args:
        config_path (str | Path): path to the configuration file

    Returns:
        ExperimentConfig: the validated configuration with every default filled in

    Raises:
        ConfigError: on unreadable files, JSON syntax errors or failed validation
    """
    return _load(config_path, ExperimentConfig)


def load_comparison(spec_path: str | Path) -> ComparisonSpec:
    return _load(spec_path, ComparisonSpec)


def apply_overrides(
    config: Model, seed: int | None = None, out: str | None = None, rounds: int | None = None
) -> Model:
    """Apply CLI flag overrides to a run config or comparison spec and revalidate."""
    payload = config.model_dump(mode="json")
    if out is not None:
        payload["output_dir"] = str(out)
    if isinstance(config, ComparisonSpec):
        if seed is not None:
            payload["seeds"] = [seed]
        if rounds is not None:
            payload["base"]["train"]["rounds"] = rounds
    else:
        if seed is not None:
            payload["seed"] = seed
        if rounds is not None:
            payload["train"]["rounds"] = rounds
    return validate(type(config), payload)


def echo(config: BaseModel) -> str:
    """The effective configuration as JSON; loading it reproduces `config`."""
    return json.dumps(config.model_dump(mode="json"), indent=2) + "\n"
