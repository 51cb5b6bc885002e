import json
from pathlib import Path

import hypothesis.strategies as st
import numpy as np
from hypothesis import settings

from hovefl.core.data import Dataset, DeviceShard, Role, TaskKind
from hovefl.core.models import ModelKind, ModelParams, ParamLayout, ShardData
from hovefl.utilities.config import ExperimentConfig

EXAMPLES = Path(__file__).resolve().parents[1] / "data" / "examples"

expensive = settings(max_examples=200, deadline=None)
seeds = st.integers(min_value=0, max_value=2**31 - 1)


class FunctionObjective:
    """Objective built from plain callables; never reports a quadratic form."""

    def __init__(self, value, gradient, dim):
        self._value = value
        self._gradient = gradient
        self.dim = dim

    def value(self, theta):
        return float(self._value(np.asarray(theta, dtype=np.float64)))

    def gradient(self, theta):
        return np.asarray(self._gradient(np.asarray(theta, dtype=np.float64)), dtype=np.float64)

    def quadratic_form(self):
        return None


def random_problem(kind: ModelKind, seed: int, n: int = 8, f: int = 3, k: int = 3, hidden: int = 4):
    """Random params and a full-feature shard for one model kind."""
    gen = np.random.default_rng(seed)
    X = gen.normal(size=(n, f))
    if kind is ModelKind.RIDGE:
        y = gen.normal(size=n)
        task, n_classes = TaskKind.REGRESSION, 1
    else:
        y = gen.integers(0, k, size=n).astype(np.float64)
        task = TaskKind.BINARY_CLASSIFICATION if k == 2 else TaskKind.MULTICLASS
        n_classes = k
    ds = Dataset(X, y, [f"s{i}" for i in range(n)], [f"f{j}" for j in range(f)], task, n_classes)
    layout = ParamLayout.for_dataset(kind, ds, hidden)
    params = ModelParams(gen.normal(size=layout.dim) * 0.5, layout)
    return params, ShardData.full(ds, layout), ds


def vertical_shard(ds: Dataset, layout: ParamLayout, features) -> ShardData:
    shard = DeviceShard(0, Role.VERTICAL, tuple(range(ds.n_samples)), tuple(features))
    return ShardData.from_shard(ds, shard, layout)


def run_config(**sections) -> ExperimentConfig:
    """Small ridge hybrid run, with per-section overrides merged in."""
    payload = {
        "seed": 0,
        "dataset": {"kind": "regression", "n_samples": 120, "n_features": 4, "noise_std": 0.1},
        "topology": {"n_horizontal": 4, "n_vertical": 2},
        "model": {"kind": "ridge"},
        "train": {"mu": 0.05, "rounds": 20, "alpha": 0.01},
        "analysis": {"enabled": True, "probe_count": 8},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            payload[key] = {**payload.get(key, {}), **value}
        else:
            payload[key] = value
    return ExperimentConfig.model_validate(payload)


def write_config(path: Path, config) -> Path:
    payload = config if isinstance(config, dict) else config.model_dump(mode="json")
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return path
