"""
Datasets, synthetic generators, CSV ingestion and the device partitioners.

Horizontal devices get disjoint, label-skewed sample sets over the full feature
space; vertical devices share one sample set and split the feature space into
(optionally overlapping) contiguous blocks.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from hovefl.core.numerics import (
    STREAM_DATA,
    Matrix,
    RngStream,
    Vector,
    gaussian,
    matvec,
)
from hovefl.utilities.errors import (
    CoverageError,
    DataFormatError,
    EmptyDatasetError,
    InfeasiblePartitionError,
)


class TaskKind(str, Enum):
    REGRESSION = "regression"
    BINARY_CLASSIFICATION = "binary_classification"
    MULTICLASS = "multiclass"

    @property
    def is_classification(self) -> bool:
        return self is not TaskKind.REGRESSION


class Role(str, Enum):
    HORIZONTAL = "horizontal"
    VERTICAL = "vertical"


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Aligned sample x feature matrix with labels and identifiers.

    Attributes:
        X (Matrix): n_samples x n_features
        y (Vector): targets; integer-valued class labels for classification tasks
        sample_ids (list[str]): unique per row
        feature_ids (list[str]): unique per column
        task_kind (TaskKind): regression / binary / multiclass
        n_classes (int): number of classes (1 for regression)
        metadata (dict): generator bookkeeping, e.g. the true weights
    """
    X: Matrix
    y: Vector
    sample_ids: list[str]
    feature_ids: list[str]
    task_kind: TaskKind
    n_classes: int = 1
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-D, got shape {self.X.shape}")
        n, d = self.X.shape
        if self.y.shape != (n,) or len(self.sample_ids) != n:
            raise ValueError("X rows, y and sample_ids must have the same length")
        if len(self.feature_ids) != d:
            raise ValueError("X columns and feature_ids must have the same length")
        if len(set(self.sample_ids)) != n or len(set(self.feature_ids)) != d:
            raise ValueError("sample_ids and feature_ids must be unique")
        if self.task_kind.is_classification:
            if self.n_classes < 2:
                raise ValueError("classification datasets need n_classes >= 2")
            if self.task_kind is TaskKind.BINARY_CLASSIFICATION and self.n_classes != 2:
                raise ValueError("binary classification requires n_classes == 2")
            labels = self.y
            if n and (
                np.any(labels != np.round(labels))
                or labels.min() < 0
                or labels.max() >= self.n_classes
            ):
                raise ValueError(f"labels must be integers in [0, {self.n_classes})")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: Sequence[int]) -> Dataset:
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            X=self.X[rows],
            y=self.y[rows],
            sample_ids=[self.sample_ids[i] for i in rows],
            feature_ids=list(self.feature_ids),
            task_kind=self.task_kind,
            n_classes=self.n_classes,
            metadata=self.metadata,
        )

    def class_labels(self) -> np.ndarray:
        return self.y.astype(np.int64)


@dataclass(frozen=True)
class DeviceShard:
    device_id: int
    role: Role
    sample_indices: tuple[int, ...]
    feature_indices: tuple[int, ...]

    @property
    def sample_count(self) -> int:
        return len(self.sample_indices)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "role": self.role.value,
            "sample_indices": sorted(self.sample_indices),
            "feature_indices": sorted(self.feature_indices),
        }


@dataclass(frozen=True, eq=False)
class Topology:
    """
    Hybrid device topology over one dataset.

    Attributes:
        shards (list[DeviceShard]): horizontal devices first, then vertical ones
        n_horizontal (int): devices sharing the feature space (N_i)
        n_vertical (int): devices sharing the sample set (N_j)
        global_dim (int): size M of the global parameter space
        coordinate_map (np.ndarray): bool mask of trainable coordinates, one row per shard
    """
    shards: list[DeviceShard]
    n_horizontal: int
    n_vertical: int
    global_dim: int
    coordinate_map: np.ndarray

    def __post_init__(self):
        if self.n_horizontal + self.n_vertical != len(self.shards):
            raise ValueError("n_horizontal + n_vertical must equal the number of shards")
        if self.coordinate_map.shape != (len(self.shards), self.global_dim):
            raise ValueError("coordinate_map must have one mask row per shard")
        uncovered = np.flatnonzero(~self.coordinate_map.any(axis=0))
        if uncovered.size:
            raise CoverageError(uncovered.tolist())

    def mask(self, device_id: int) -> np.ndarray:
        return self.coordinate_map[self._position(device_id)]

    def _position(self, device_id: int) -> int:
        for position, shard in enumerate(self.shards):
            if shard.device_id == device_id:
                return position
        raise KeyError(f"unknown device {device_id}")

    def summary(self) -> dict:
        return {
            "n_horizontal": self.n_horizontal,
            "n_vertical": self.n_vertical,
            "global_dim": self.global_dim,
            "sample_counts": [shard.sample_count for shard in self.shards],
            "feature_counts": [len(shard.feature_indices) for shard in self.shards],
            "trainable_coordinates": self.coordinate_map.sum(axis=1).tolist(),
        }

    def dump_shards(self) -> str:
        return json.dumps([shard.to_dict() for shard in self.shards], indent=2)


# ---------------------------------------------------------------------------
# generators and ingestion
# ---------------------------------------------------------------------------

def _ids(prefix: str, n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def generate_regression(
    n_samples: int, n_features: int, noise_std: float, seed: int
) -> Dataset:
    """
    Linear-Gaussian regression data: X ~ N(0, I), y = X w_true + noise.

    The true weights are kept in `metadata["w_true"]`.
    """
    if n_samples < 1 or n_features < 1:
        raise ValueError("n_samples and n_features must be >= 1")
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = RngStream(seed, STREAM_DATA)
    w_true = gaussian(rng, n_features)
    X = gaussian(rng, n_samples * n_features).reshape(n_samples, n_features)
    noise = gaussian(rng, n_samples) * noise_std
    y = matvec(X, w_true) + noise
    return Dataset(
        X=X,
        y=y,
        sample_ids=_ids("s", n_samples),
        feature_ids=_ids("f", n_features),
        task_kind=TaskKind.REGRESSION,
        n_classes=1,
        metadata={"generator": "regression", "w_true": w_true.tolist(), "noise_std": noise_std},
    )


def generate_classification(
    n_samples: int, n_features: int, n_classes: int, cluster_sep: float, seed: int
) -> Dataset:
    """
    Gaussian class clusters with unit isotropic noise.

    With n_features >= n_classes the class means are orthonormal directions scaled by
    cluster_sep / sqrt(2), so every pair of means is exactly cluster_sep apart and all
    means share one norm. Otherwise means are random directions of norm cluster_sep / 2.
    Labels are balanced within one sample.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if not cluster_sep > 0:
        raise ValueError("cluster_sep must be > 0")
    if n_samples < 1 or n_features < 1:
        raise ValueError("n_samples and n_features must be >= 1")
    rng = RngStream(seed, STREAM_DATA)
    if n_features >= n_classes:
        basis, _ = np.linalg.qr(gaussian(rng, n_features * n_classes).reshape(n_features, n_classes))
        means = basis.T * (cluster_sep / math.sqrt(2.0))
    else:
        directions = gaussian(rng, n_classes * n_features).reshape(n_classes, n_features)
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = directions * (cluster_sep / 2.0)
    labels = rng.generator.permutation(np.arange(n_samples) % n_classes)
    X = means[labels] + gaussian(rng, n_samples * n_features).reshape(n_samples, n_features)
    kind = TaskKind.BINARY_CLASSIFICATION if n_classes == 2 else TaskKind.MULTICLASS
    return Dataset(
        X=X,
        y=labels.astype(np.float64),
        sample_ids=_ids("s", n_samples),
        feature_ids=_ids("f", n_features),
        task_kind=kind,
        n_classes=n_classes,
        metadata={"generator": "classification", "cluster_sep": cluster_sep},
    )


@dataclass(frozen=True)
class CsvSchema:
    feature_columns: list[str]
    label_column: str
    task_kind: TaskKind
    n_classes: int | None = None
    id_column: str | None = None


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """
    Load a comma-separated, UTF-8 file with a header row into a Dataset.

    Raises:
        DataFormatError: missing column, non-numeric cell, repeated sample id or
            undecodable bytes (with line/column)
        EmptyDatasetError: header-only or empty file
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataFormatError(
            f"{path} is not valid UTF-8: {e.reason}", row=raw[: e.start].count(b"\n") + 1
        ) from None

    with io.StringIO(text, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path} is empty, expected a header row", row=1)
        header = [name.strip() for name in header]
        wanted = [*schema.feature_columns, schema.label_column]
        if schema.id_column:
            wanted.append(schema.id_column)
        for name in wanted:
            if name not in header:
                raise DataFormatError(f"missing column in {path}", row=1, column=name)
        position = {name: header.index(name) for name in header}

        features, labels, ids = [], [], []
        seen: dict[str, int] = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} cells, found {len(row)}", row=line_no
                )
            values = []
            for name in [*schema.feature_columns, schema.label_column]:
                cell = row[position[name]].strip()
                try:
                    value = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"non-numeric cell {cell!r}", row=line_no, column=name
                    ) from None
                if not math.isfinite(value):
                    raise DataFormatError(f"non-finite cell {cell!r}", row=line_no, column=name)
                values.append(value)
            sample_id = None
            if schema.id_column:
                sample_id = row[position[schema.id_column]].strip()
                if sample_id in seen:
                    raise DataFormatError(
                        f"sample id {sample_id!r} already used on line {seen[sample_id]}",
                        row=line_no,
                        column=schema.id_column,
                    )
                seen[sample_id] = line_no
            features.append(values[:-1])
            labels.append(values[-1])
            ids.append(sample_id)

    if not features:
        raise EmptyDatasetError(str(path))

    y = np.array(labels, dtype=np.float64)
    n_classes = 1
    if schema.task_kind.is_classification:
        n_classes = schema.n_classes or int(y.max()) + 1
        if schema.task_kind is TaskKind.BINARY_CLASSIFICATION:
            n_classes = 2
        bad = np.flatnonzero((y != np.round(y)) | (y < 0) | (y >= n_classes))
        if bad.size:
            raise DataFormatError(
                f"label {y[bad[0]]!r} is not an integer in [0, {n_classes})",
                row=int(bad[0]) + 2,
                column=schema.label_column,
            )
    sample_ids = ids if schema.id_column else _ids("s", len(features))
    return Dataset(
        X=np.array(features, dtype=np.float64).reshape(len(features), len(schema.feature_columns)),
        y=y,
        sample_ids=sample_ids,
        feature_ids=list(schema.feature_columns),
        task_kind=schema.task_kind,
        n_classes=n_classes,
        metadata={"source": str(path)},
    )


def write_csv(ds: Dataset, path: str | Path, label_column: str = "label") -> CsvSchema:
    """Write a dataset in the format `load_csv` reads; returns the matching schema."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", *ds.feature_ids, label_column])
        for sid, row, label in zip(ds.sample_ids, ds.X, ds.y):
            writer.writerow([sid, *(repr(float(v)) for v in row), repr(float(label))])
    return CsvSchema(
        feature_columns=list(ds.feature_ids),
        label_column=label_column,
        task_kind=ds.task_kind,
        n_classes=ds.n_classes if ds.task_kind.is_classification else None,
        id_column="sample_id",
    )


def split_train_test(ds: Dataset, test_fraction: float, rng: RngStream) -> tuple[Dataset, Dataset | None]:
    """
    Random hold-out split; `test_fraction == 0` returns no test split. The train split
    always keeps at least one row.
    """
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must be in [0, 1)")
    n_test = min(int(round(ds.n_samples * test_fraction)), ds.n_samples - 1)
    if n_test == 0:
        return ds, None
    order = rng.generator.permutation(ds.n_samples)
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------------
# partitioners
# ---------------------------------------------------------------------------

def _skew_groups(ds: Dataset, pool: np.ndarray, n_devices: int) -> list[np.ndarray]:
    """Groups of pool rows that the Dirichlet split treats as classes."""
    if ds.task_kind.is_classification:
        labels = ds.class_labels()[pool]
        return [pool[labels == k] for k in range(ds.n_classes)]
    # label-quantile bins for regression targets
    n_bins = max(2, n_devices)
    order = pool[np.argsort(ds.y[pool], kind="stable")]
    return [chunk for chunk in np.array_split(order, n_bins)]


def partition_horizontal(
    ds: Dataset,
    n_devices: int,
    dirichlet_beta: float,
    min_per_device: int,
    rng: RngStream,
    pool: Sequence[int] | None = None,
) -> list[DeviceShard]:
    """
    Split samples over devices with Dirichlet label skew.

    For every class (or target-quantile bin for regression) the class rows are shuffled
    and cut according to proportions drawn from Dirichlet(beta) over devices. Devices
    left below `min_per_device` receive randomly chosen rows from the currently largest
    shard until all meet the minimum.

    Args:
        ds (Dataset): source data
        n_devices (int): number of horizontal devices
        dirichlet_beta (float): concentration; small values give strong skew
        min_per_device (int): lower bound on every shard's sample count
        rng (RngStream): randomness for shuffles and proportions
        pool (Sequence[int] | None): rows to partition, defaults to all rows

    Returns:
        list[DeviceShard]: disjoint, exhaustive horizontal shards (device ids 0..n-1)

    Raises:
        InfeasiblePartitionError: if n_devices * min_per_device exceeds the pool size
    """
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if not dirichlet_beta > 0:
        raise ValueError("dirichlet_beta must be > 0")
    if min_per_device < 1:
        raise ValueError("min_per_device must be >= 1")
    pool = np.arange(ds.n_samples) if pool is None else np.asarray(pool, dtype=np.int64)
    if n_devices * min_per_device > pool.size:
        raise InfeasiblePartitionError(
            f"cannot give {n_devices} devices at least {min_per_device} samples "
            f"each from {pool.size} samples"
        )

    gen = rng.generator
    buckets: list[list[int]] = [[] for _ in range(n_devices)]
    for group in _skew_groups(ds, pool, n_devices):
        if group.size == 0:
            continue
        group = gen.permutation(group)
        proportions = gen.dirichlet(np.full(n_devices, dirichlet_beta))
        cuts = (np.cumsum(proportions) * group.size).astype(np.int64)[:-1]
        for device, chunk in enumerate(np.split(group, cuts)):
            buckets[device].extend(chunk.tolist())

    while True:
        sizes = [len(bucket) for bucket in buckets]
        needy = [d for d in range(n_devices) if sizes[d] < min_per_device]
        if not needy:
            break
        donor = int(np.argmax(sizes))
        receiver = needy[0]
        take = int(gen.integers(len(buckets[donor])))
        buckets[receiver].append(buckets[donor].pop(take))

    all_features = tuple(range(ds.n_features))
    return [
        DeviceShard(
            device_id=device,
            role=Role.HORIZONTAL,
            sample_indices=tuple(sorted(bucket)),
            feature_indices=all_features,
        )
        for device, bucket in enumerate(buckets)
    ]


def partition_vertical(
    ds: Dataset,
    n_devices: int,
    overlap_fraction: float,
    rng: RngStream,
    pool: Sequence[int] | None = None,
    shuffle_features: bool = False,
) -> list[DeviceShard]:
    """
    Split the feature space over devices that all hold the same samples.

    Features are cut into `n_devices` contiguous near-equal blocks; each block then
    borrows floor(overlap_fraction * block_size + 0.5) features from the front of the
    next block (cyclically).
    """
    if n_devices < 1:
        raise ValueError("n_devices must be >= 1")
    if not 0 <= overlap_fraction < 1:
        raise ValueError("overlap_fraction must be in [0, 1)")
    if ds.n_features < n_devices:
        raise InfeasiblePartitionError(
            f"{ds.n_features} features cannot be split over {n_devices} vertical devices"
        )
    pool = np.arange(ds.n_samples) if pool is None else np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise InfeasiblePartitionError("vertical devices need a non-empty sample pool")

    order = np.arange(ds.n_features)
    if shuffle_features:
        order = rng.generator.permutation(order)
    blocks = [block.tolist() for block in np.array_split(order, n_devices)]
    samples = tuple(sorted(pool.tolist()))

    shards = []
    for device, block in enumerate(blocks):
        features = list(block)
        if n_devices > 1:
            n_borrow = int(math.floor(overlap_fraction * len(block) + 0.5))
            following = blocks[(device + 1) % n_devices]
            features += following[: min(n_borrow, len(following))]
        shards.append(
            DeviceShard(
                device_id=device,
                role=Role.VERTICAL,
                sample_indices=samples,
                feature_indices=tuple(sorted(set(features))),
            )
        )
    return shards


def build_topology(
    ds: Dataset,
    n_horizontal: int,
    n_vertical: int,
    h_params: dict,
    v_params: dict,
    layout,
    rng: RngStream,
    pool_ratio: float = 0.5,
) -> Topology:
    """
    Build the hybrid device topology.

    Rows are shuffled and cut into a horizontal pool (fraction `pool_ratio`) and a
    disjoint vertical pool; a pure topology uses every row for its single group.
    Horizontal devices get ids 0..H-1 and vertical devices H..H+V-1.

    Args:
        ds (Dataset): training data
        n_horizontal (int): number of horizontal devices
        n_vertical (int): number of vertical devices
        h_params (dict): `dirichlet_beta` and `min_per_device` for `partition_horizontal`
        v_params (dict): `overlap_fraction` (and optional `shuffle_features`)
        layout (ParamLayout): parameter layout of the model, provides feature masks
        rng (RngStream): partition randomness
        pool_ratio (float): share of rows given to horizontal devices in a hybrid topology
    """
    if n_horizontal < 0 or n_vertical < 0 or n_horizontal + n_vertical < 1:
        raise ValueError("need n_horizontal + n_vertical >= 1 and both non-negative")
    if not 0 < pool_ratio < 1:
        raise ValueError("pool_ratio must be in (0, 1)")

    rows = rng.child(0).generator.permutation(ds.n_samples)
    if n_vertical == 0:
        h_pool, v_pool = rows, rows[:0]
    elif n_horizontal == 0:
        h_pool, v_pool = rows[:0], rows
    else:
        cut = int(round(ds.n_samples * pool_ratio))
        cut = min(max(cut, 1), ds.n_samples - 1)
        h_pool, v_pool = rows[:cut], rows[cut:]

    shards: list[DeviceShard] = []
    if n_horizontal:
        shards += partition_horizontal(
            ds,
            n_horizontal,
            h_params.get("dirichlet_beta", 0.5),
            h_params.get("min_per_device", 1),
            rng.child(1),
            pool=np.sort(h_pool),
        )
    if n_vertical:
        for shard in partition_vertical(
            ds,
            n_vertical,
            v_params.get("overlap_fraction", 0.0),
            rng.child(2),
            pool=np.sort(v_pool),
            shuffle_features=v_params.get("shuffle_features", False),
        ):
            shards.append(
                DeviceShard(
                    device_id=n_horizontal + shard.device_id,
                    role=shard.role,
                    sample_indices=shard.sample_indices,
                    feature_indices=shard.feature_indices,
                )
            )

    coordinate_map = np.stack([layout.feature_mask(shard.feature_indices) for shard in shards])
    return Topology(
        shards=shards,
        n_horizontal=n_horizontal,
        n_vertical=n_vertical,
        global_dim=layout.dim,
        coordinate_map=coordinate_map,
    )
