"""
Parameter spaces, losses and analytic gradients for the three model kinds.

All devices live in one global parameter space. A device trains only the
coordinates in its mask: features it does not hold are zero-filled in its inputs
and the matching gradient entries are forced to exactly zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from typing import Protocol, Sequence

import numpy as np
from typing_extensions import Self

from hovefl.core.data import Dataset, DeviceShard, TaskKind
from hovefl.core.numerics import Matrix, Vector, dot, matmul
from hovefl.utilities.errors import (
    DimensionMismatchError,
    EmptyShardError,
    LabelError,
    SingularSystemError,
)


class ModelKind(str, Enum):
    RIDGE = "ridge"
    LOGISTIC = "logistic"
    MLP = "mlp"


@dataclass(frozen=True)
class ParamLayout:
    """
    Maps global coordinates to model roles.

    Blocks are stored in order, each row-major:
        ridge:    W (n_features x 1), b (1)
        logistic: W (n_features x K), b (K)
        mlp:      W1 (n_features x hidden), b1 (hidden), W2 (hidden x K), b2 (K)
    K is 1 (sigmoid head) for two classes and n_classes (softmax head) otherwise.
    """
    model_kind: ModelKind
    n_features: int
    n_classes: int = 1
    hidden_width: int = 16

    def __post_init__(self):
        if self.n_features < 1:
            raise ValueError("n_features must be >= 1")
        if self.model_kind is ModelKind.RIDGE and self.n_classes != 1:
            raise ValueError("ridge models are regression models (n_classes == 1)")
        if self.model_kind is not ModelKind.RIDGE and self.n_classes < 2:
            raise ValueError(f"{self.model_kind.value} models need n_classes >= 2")
        if self.model_kind is ModelKind.MLP and self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    @classmethod
    def for_dataset(cls, kind: ModelKind | str, ds: Dataset, hidden_width: int = 16) -> ParamLayout:
        kind = ModelKind(kind)
        if (kind is ModelKind.RIDGE) == ds.task_kind.is_classification:
            raise ValueError(f"model kind '{kind.value}' does not fit a {ds.task_kind.value} task")
        return cls(kind, ds.n_features, ds.n_classes, hidden_width)

    @property
    def n_outputs(self) -> int:
        if self.model_kind is ModelKind.RIDGE or self.n_classes == 2:
            return 1
        return self.n_classes

    @cached_property
    def blocks(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every parameter block."""
        f, k, h = self.n_features, self.n_outputs, self.hidden_width
        if self.model_kind is ModelKind.MLP:
            shapes = [("W1", (f, h)), ("b1", (h,)), ("W2", (h, k)), ("b2", (k,))]
        else:
            shapes = [("W", (f, k)), ("b", (k,))]
        blocks, offset = [], 0
        for name, shape in shapes:
            blocks.append((name, shape, offset))
            offset += int(np.prod(shape))
        return blocks

    @property
    def dim(self) -> int:
        name, shape, offset = self.blocks[-1]
        return offset + int(np.prod(shape))

    @property
    def feature_block(self) -> str:
        return "W1" if self.model_kind is ModelKind.MLP else "W"

    def unpack(self, theta: Vector) -> dict[str, np.ndarray]:
        """Views of `theta` reshaped per block (writes go through to `theta`)."""
        if theta.shape != (self.dim,):
            raise DimensionMismatchError(self.dim, theta.size, what="parameter")
        return {
            name: theta[offset : offset + int(np.prod(shape))].reshape(shape)
            for name, shape, offset in self.blocks
        }

    def role(self, coordinate: int) -> tuple[str, int, int]:
        """(block, row, column) of a global coordinate; vectors report column 0."""
        if not 0 <= coordinate < self.dim:
            raise IndexError(f"coordinate {coordinate} outside [0, {self.dim})")
        for name, shape, offset in self.blocks:
            size = int(np.prod(shape))
            if coordinate < offset + size:
                local = coordinate - offset
                if len(shape) == 1:
                    return name, local, 0
                return name, local // shape[1], local % shape[1]
        raise AssertionError("unreachable")

    def feature_mask(self, feature_indices: Sequence[int]) -> np.ndarray:
        """
        Coordinates reachable from a subset of input features.

        Weight rows of the given features plus every block not tied to a single input
        feature (biases, and the hidden/output layers of the MLP).
        """
        mask = np.ones(self.dim, dtype=bool)
        name, shape, offset = next(b for b in self.blocks if b[0] == self.feature_block)
        rows = np.zeros(shape[0], dtype=bool)
        rows[list(feature_indices)] = True
        mask[offset : offset + int(np.prod(shape))] = np.repeat(rows, shape[1])
        return mask

    def describe(self) -> dict:
        return {
            "model_kind": self.model_kind.value,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "hidden_width": self.hidden_width,
            "dim": self.dim,
        }


@dataclass(frozen=True, eq=False)
class ModelParams:
    theta: Vector
    layout: ParamLayout

    def __post_init__(self):
        if self.theta.shape != (self.layout.dim,):
            raise DimensionMismatchError(self.layout.dim, self.theta.size, what="parameter")

    @classmethod
    def zeros(cls, layout: ParamLayout) -> Self:
        return cls(np.zeros(layout.dim), layout)

    @property
    def model_kind(self) -> ModelKind:
        return self.layout.model_kind

    def with_theta(self, theta: Vector) -> Self:
        return type(self)(np.asarray(theta, dtype=np.float64), self.layout)

    def to_json(self) -> str:
        return json.dumps({"layout": self.layout.describe(), "theta": self.theta.tolist()})

    @classmethod
    def from_json(cls, text: str) -> Self:
        payload = json.loads(text)
        spec = payload["layout"]
        layout = ParamLayout(
            ModelKind(spec["model_kind"]), spec["n_features"], spec["n_classes"], spec["hidden_width"]
        )
        return cls(np.array(payload["theta"], dtype=np.float64), layout)


@dataclass(frozen=True)
class LossReport:
    """Local objective F = mean_sample_loss + alpha * reg_value."""
    mean_sample_loss: float
    reg_value: float
    total: float
    alpha: float

    def to_dict(self) -> dict:
        return {
            "mean_sample_loss": self.mean_sample_loss,
            "reg_value": self.reg_value,
            "total": self.total,
            "alpha": self.alpha,
        }


@dataclass(frozen=True, eq=False)
class ShardData:
    """
    A device's training view: full-width inputs with absent features set to zero.

    Attributes:
        X (Matrix): samples x n_features, columns outside the device's features are 0
        y (Vector): targets / labels
        mask (np.ndarray): bool mask of the device's trainable global coordinates
        layout (ParamLayout): parameter layout shared by all devices
    """
    X: Matrix
    y: Vector
    mask: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        if self.X.shape[0] == 0:
            raise EmptyShardError("shard has no samples")
        if self.X.shape[1] != self.layout.n_features:
            raise DimensionMismatchError(self.layout.n_features, self.X.shape[1], what="feature")
        if self.mask.shape != (self.layout.dim,):
            raise DimensionMismatchError(self.layout.dim, self.mask.size, what="mask")
        _check_labels(self.y, self.layout)

    @classmethod
    def from_shard(cls, ds: Dataset, shard: DeviceShard, layout: ParamLayout) -> ShardData:
        rows = np.asarray(shard.sample_indices, dtype=np.int64)
        if rows.size == 0:
            raise EmptyShardError(f"device {shard.device_id} has no samples")
        X = np.zeros((rows.size, ds.n_features))
        cols = np.asarray(shard.feature_indices, dtype=np.int64)
        X[:, cols] = ds.X[np.ix_(rows, cols)]
        return cls(X, ds.y[rows].copy(), layout.feature_mask(shard.feature_indices), layout)

    @classmethod
    def full(cls, ds: Dataset, layout: ParamLayout) -> ShardData:
        if ds.n_samples == 0:
            raise EmptyShardError("dataset split is empty")
        return cls(ds.X, ds.y, np.ones(layout.dim, dtype=bool), layout)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    def rows(self, index: np.ndarray) -> ShardData:
        return ShardData(self.X[index], self.y[index], self.mask, self.layout)


def _check_labels(y: Vector, layout: ParamLayout) -> None:
    if layout.model_kind is ModelKind.RIDGE:
        return
    bad = (y != np.round(y)) | (y < 0) | (y >= layout.n_classes)
    if np.any(bad):
        raise LabelError(y[np.flatnonzero(bad)[0]], layout.n_classes)


# ---------------------------------------------------------------------------
# forward / backward passes
# ---------------------------------------------------------------------------

def _head(Z: Matrix, y: Vector, want_grad: bool) -> tuple[Vector, Matrix | None]:
    """Per-sample cross-entropy of logits Z and its gradient w.r.t. Z."""
    if Z.shape[1] == 1:
        z = Z[:, 0]
        losses = np.logaddexp(0.0, z) - y * z
        if not want_grad:
            return losses, None
        prob = np.exp(-np.logaddexp(0.0, -z))
        return losses, (prob - y)[:, None]
    labels = y.astype(np.int64)
    shift = Z.max(axis=1, keepdims=True)
    lse = shift[:, 0] + np.log(np.exp(Z - shift).sum(axis=1))
    losses = lse - Z[np.arange(Z.shape[0]), labels]
    if not want_grad:
        return losses, None
    dZ = np.exp(Z - lse[:, None])
    dZ[np.arange(Z.shape[0]), labels] -= 1.0
    return losses, dZ


def _loss_and_grad(
    theta: Vector, layout: ParamLayout, X: Matrix, y: Vector, want_grad: bool = True
) -> tuple[float, Vector | None]:
    """Mean sample loss over (X, y) and its gradient in the global space."""
    n = X.shape[0]
    p = layout.unpack(theta)
    grad = np.zeros(layout.dim) if want_grad else None
    g = layout.unpack(grad) if want_grad else None

    if layout.model_kind is ModelKind.RIDGE:
        residual = matmul(X, p["W"][:, 0]) + p["b"][0] - y
        loss = float(np.mean(0.5 * residual**2))
        if want_grad:
            g["W"][:, 0] = matmul(X.T, residual) / n
            g["b"][0] = residual.sum() / n
        return loss, grad

    if layout.model_kind is ModelKind.LOGISTIC:
        Z = matmul(X, p["W"]) + p["b"]
        losses, dZ = _head(Z, y, want_grad)
        if want_grad:
            g["W"][:] = matmul(X.T, dZ) / n
            g["b"][:] = dZ.sum(axis=0) / n
        return float(np.mean(losses)), grad

    hidden = np.tanh(matmul(X, p["W1"]) + p["b1"])
    Z = matmul(hidden, p["W2"]) + p["b2"]
    losses, dZ = _head(Z, y, want_grad)
    if want_grad:
        g["W2"][:] = matmul(hidden.T, dZ) / n
        g["b2"][:] = dZ.sum(axis=0) / n
        dA = matmul(dZ, p["W2"].T) * (1.0 - hidden**2)
        g["W1"][:] = matmul(X.T, dA) / n
        g["b1"][:] = dA.sum(axis=0) / n
    return float(np.mean(losses)), grad


def predict(params: ModelParams, X: Matrix) -> np.ndarray:
    """Regression outputs, or predicted class labels for classifiers."""
    layout, p = params.layout, params.layout.unpack(params.theta)
    if layout.model_kind is ModelKind.RIDGE:
        return matmul(X, p["W"][:, 0]) + p["b"][0]
    if layout.model_kind is ModelKind.LOGISTIC:
        Z = matmul(X, p["W"]) + p["b"]
    else:
        Z = matmul(np.tanh(matmul(X, p["W1"]) + p["b1"]), p["W2"]) + p["b2"]
    if Z.shape[1] == 1:
        return (Z[:, 0] > 0).astype(np.int64)
    return Z.argmax(axis=1)


def sample_loss(params: ModelParams, x: Vector, y_true: float) -> float:
    """
    Loss of one sample: 0.5 * squared error for ridge, cross-entropy otherwise.

    `x` must already be zero-filled to the layout's full feature width.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.layout.n_features,):
        raise DimensionMismatchError(params.layout.n_features, x.size, what="input")
    y = np.array([y_true], dtype=np.float64)
    _check_labels(y, params.layout)
    loss, _ = _loss_and_grad(params.theta, params.layout, x[None, :], y, want_grad=False)
    return loss


def _regularizer(theta: Vector, mask: np.ndarray) -> float:
    masked = np.where(mask, theta, 0.0)
    return 0.5 * dot(masked, masked)


def loss_and_gradient(
    params: ModelParams, shard_data: ShardData, alpha: float
) -> tuple[LossReport, Vector]:
    """Local objective and its masked gradient in one pass."""
    loss, grad = _loss_and_grad(params.theta, shard_data.layout, shard_data.X, shard_data.y)
    reg = _regularizer(params.theta, shard_data.mask)
    grad = np.where(shard_data.mask, grad + alpha * params.theta, 0.0)
    return LossReport(loss, reg, loss + alpha * reg, alpha), grad


def local_objective(params: ModelParams, shard_data: ShardData, alpha: float) -> LossReport:
    """F = (1/D) sum_i f(m; x_i, y_i) + alpha * zeta(m), zeta = 0.5 * ||m restricted to mask||^2."""
    loss, _ = _loss_and_grad(
        params.theta, shard_data.layout, shard_data.X, shard_data.y, want_grad=False
    )
    reg = _regularizer(params.theta, shard_data.mask)
    return LossReport(loss, reg, loss + alpha * reg, alpha)


def local_gradient(params: ModelParams, shard_data: ShardData, alpha: float) -> Vector:
    """Analytic gradient of `local_objective`; off-mask coordinates are exactly 0."""
    return loss_and_gradient(params, shard_data, alpha)[1]


# ---------------------------------------------------------------------------
# quadratic (ridge) objectives
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """Objective 0.5 * m^T H m - b^T m + c with symmetric H."""
    H: Matrix
    b: Vector
    c: float

    @property
    def dim(self) -> int:
        return self.b.size

    def value(self, theta: Vector) -> float:
        return 0.5 * dot(theta, matmul(self.H, theta)) - dot(self.b, theta) + self.c

    def gradient(self, theta: Vector) -> Vector:
        return matmul(self.H, theta) - self.b

    def quadratic_form(self) -> QuadraticForm:
        return self

    @cached_property
    def eigenvalues(self) -> Vector:
        return np.linalg.eigvalsh(self.H)

    def minimizer(self) -> Vector:
        eig = self.eigenvalues
        if eig[0] <= 1e-12 * max(abs(eig[-1]), 1.0):
            raise SingularSystemError(
                "normal equations are singular (smallest Hessian eigenvalue "
                f"{eig[0]:.3e}); use alpha > 0"
            )
        return np.linalg.solve(self.H, self.b)

    def __add__(self, other: QuadraticForm) -> QuadraticForm:
        return QuadraticForm(self.H + other.H, self.b + other.b, self.c + other.c)

    def scaled(self, weight: float) -> QuadraticForm:
        return QuadraticForm(weight * self.H, weight * self.b, weight * self.c)


def ridge_quadratic(shard_data: ShardData, alpha: float) -> QuadraticForm:
    """Exact quadratic form of a ridge device's local objective."""
    if shard_data.layout.model_kind is not ModelKind.RIDGE:
        raise ValueError("quadratic forms exist only for ridge models")
    n = shard_data.n_samples
    design = np.hstack([shard_data.X, np.ones((n, 1))])
    H = matmul(design.T, design) / n + alpha * np.diag(shard_data.mask.astype(np.float64))
    b = matmul(design.T, shard_data.y) / n
    c = 0.5 * dot(shard_data.y, shard_data.y) / n
    return QuadraticForm(H, b, c)


def ridge_closed_form(dataset: Dataset, alpha: float) -> tuple[ModelParams, float]:
    """
    Minimiser and minimal value of the full-data ridge objective
    mean(0.5 * (w.x + b - y)^2) + alpha * 0.5 * ||(w, b)||^2.

    Raises:
        SingularSystemError: when the normal equations are singular (suggests alpha > 0)
    """
    if dataset.task_kind is not TaskKind.REGRESSION:
        raise ValueError("ridge_closed_form needs a regression dataset")
    layout = ParamLayout(ModelKind.RIDGE, dataset.n_features)
    data = ShardData.full(dataset, layout)
    form = ridge_quadratic(data, alpha)
    params = ModelParams(form.minimizer(), layout)
    return params, local_objective(params, data, alpha).total


# ---------------------------------------------------------------------------
# global objective
# ---------------------------------------------------------------------------

class Objective(Protocol):
    dim: int

    def value(self, theta: Vector) -> float: ...

    def gradient(self, theta: Vector) -> Vector: ...

    def quadratic_form(self) -> QuadraticForm | None: ...


class GlobalObjective:
    """
    Weighted mixture of device objectives, F(m) = sum_n p_n F_n(m).

    `p_n` are the aggregation weights normalised over all devices. With one full-batch
    local step the server update is a diagonally rescaled gradient step on this F.
    """

    def __init__(self, parts: Sequence[ShardData], weights: Sequence[float], alpha: float):
        if not parts:
            raise EmptyShardError("global objective needs at least one device")
        if len(parts) != len(weights):
            raise ValueError("one weight per device is required")
        total = float(sum(weights))
        if not total > 0:
            raise ValueError("device weights must have a positive sum")
        self.parts = list(parts)
        self.weights = [float(w) / total for w in weights]
        self.alpha = alpha
        self.layout = parts[0].layout
        self.dim = self.layout.dim

    def _params(self, theta: Vector) -> ModelParams:
        return ModelParams(np.asarray(theta, dtype=np.float64), self.layout)

    def value(self, theta: Vector) -> float:
        params = self._params(theta)
        total = 0.0
        for weight, part in zip(self.weights, self.parts):
            total += weight * local_objective(params, part, self.alpha).total
        return total

    def device_gradients(self, theta: Vector) -> list[Vector]:
        params = self._params(theta)
        return [local_gradient(params, part, self.alpha) for part in self.parts]

    def gradient(self, theta: Vector) -> Vector:
        grad = np.zeros(self.dim)
        for weight, device_grad in zip(self.weights, self.device_gradients(theta)):
            grad += weight * device_grad
        return grad

    def evaluate(self, theta: Vector) -> tuple[float, Vector, list[Vector]]:
        """Value, gradient and per-device gradients at one point."""
        params = self._params(theta)
        value, grad, device_grads = 0.0, np.zeros(self.dim), []
        for weight, part in zip(self.weights, self.parts):
            report, device_grad = loss_and_gradient(params, part, self.alpha)
            value += weight * report.total
            grad += weight * device_grad
            device_grads.append(device_grad)
        return value, grad, device_grads

    @cached_property
    def _form(self) -> QuadraticForm | None:
        if self.layout.model_kind is not ModelKind.RIDGE:
            return None
        form = None
        for weight, part in zip(self.weights, self.parts):
            term = ridge_quadratic(part, self.alpha).scaled(weight)
            form = term if form is None else form + term
        return form

    def quadratic_form(self) -> QuadraticForm | None:
        return self._form
