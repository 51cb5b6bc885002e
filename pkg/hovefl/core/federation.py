"""
The hybrid round protocol: local training, coordinate-wise weighted aggregation,
broadcast and evaluation.

Devices are simulated in-process. Within a round they may train in parallel on a
thread pool; every device draws mini-batches from its own counter-based stream keyed
by (seed, round, device_id), so results never depend on scheduling.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from hovefl.core.analysis import gradient_variance
from hovefl.core.data import Dataset, DeviceShard, Topology
from hovefl.core.models import (
    GlobalObjective,
    LossReport,
    ModelKind,
    ModelParams,
    ParamLayout,
    ShardData,
    local_objective,
    loss_and_gradient,
    predict,
)
from hovefl.core.numerics import STREAM_INIT, STREAM_TRAIN, RngStream, Vector, gaussian, norm
from hovefl.utilities.config import OptimizerKind, TrainConfig, WeightScheme
from hovefl.utilities.errors import CoverageError, DivergenceError, EmptyShardError

log = logging.getLogger("hovefl")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class SGD:
    def __init__(self, mu: float):
        self.mu = mu

    def step(self, theta: Vector, grad: Vector) -> Vector:
        return theta - self.mu * grad


class Adam:
    """Adam with bias correction; a fresh instance is created every round."""

    def __init__(self, mu: float, dim: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.mu = mu
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def step(self, theta: Vector, grad: Vector) -> Vector:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.mu * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: TrainConfig, dim: int) -> SGD | Adam:
    if cfg.optimizer.kind is OptimizerKind.ADAM:
        return Adam(cfg.mu, dim, cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.eps)
    return SGD(cfg.mu)


# ---------------------------------------------------------------------------
# protocol types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Device:
    shard: DeviceShard
    data: ShardData

    @property
    def device_id(self) -> int:
        return self.shard.device_id

    @property
    def sample_count(self) -> int:
        return self.shard.sample_count

    @property
    def mask(self) -> np.ndarray:
        return self.data.mask


@dataclass(frozen=True, eq=False)
class LocalUpdate:
    """
    A device's model after its local iterations.

    Attributes:
        device_id (int): reporting device
        params_after (ModelParams): off-mask coordinates equal the broadcast model
        mask (np.ndarray): trainable coordinates of the device
        sample_count (int): D_j^n, the device's number of samples
        report (LossReport): local objective at params_after
        grad_trace (list[float]): gradient norm at every local iteration
    """
    device_id: int
    params_after: ModelParams
    mask: np.ndarray
    sample_count: int
    report: LossReport
    grad_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.sample_count < 1:
            raise EmptyShardError(f"device {self.device_id} reported no samples")


@dataclass(frozen=True, eq=False)
class GlobalModel:
    params: ModelParams
    round: int = 0
    train_loss: float | None = None
    test_loss: float | None = None


@dataclass(frozen=True)
class EvalReport:
    loss: float
    accuracy: float | None = None


@dataclass(frozen=True, eq=False)
class RoundRecord:
    """
    Everything observed in one completed round.

    `objective_before`, `grad_norm` and `sigma_hat` are measured at the broadcast
    point m_G(t-1); `objective` and the losses at the new global model m_G(t).
    """
    round: int
    device_reports: dict[int, LossReport]
    train_loss: float
    test_loss: float | None
    train_accuracy: float | None
    test_accuracy: float | None
    objective_before: float
    objective: float
    grad_norm: float
    sigma_hat: float
    wall_time: float = 0.0

    def history_row(self) -> tuple[int, float, float, float, float]:
        test_loss = float("nan") if self.test_loss is None else self.test_loss
        return self.round, self.train_loss, test_loss, self.grad_norm, self.sigma_hat


@dataclass(frozen=True, eq=False)
class FederationState:
    """Server-side view between two rounds."""
    topology: Topology
    devices: list[Device]
    model: GlobalModel
    objective: GlobalObjective
    train: ShardData
    test: ShardData | None
    seed: int


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def device_weights(devices: list[Device] | list[LocalUpdate], scheme: WeightScheme) -> list[float]:
    if scheme is WeightScheme.UNIFORM:
        return [1.0 for _ in devices]
    return [float(device.sample_count) for device in devices]


def initialize(layout: ParamLayout, cfg: TrainConfig, seed: int) -> ModelParams:
    """Zero vector, or N(0, init_scale^2) draws from the init stream."""
    if cfg.init == "gaussian":
        return ModelParams(gaussian(RngStream(seed, STREAM_INIT), layout.dim) * cfg.init_scale, layout)
    return ModelParams.zeros(layout)


def local_train(device: Device, global_model: GlobalModel, cfg: TrainConfig, rng: RngStream) -> LocalUpdate:
    """
    Run `cfg.t_local` optimizer steps on the device's masked local objective,
    starting from the broadcast parameters.

    Raises:
        DivergenceError: if the loss or gradient turns non-finite (names device and iteration)
    """
    params = global_model.params
    data = device.data
    optimizer = make_optimizer(cfg, params.layout.dim)
    theta = params.theta.copy()
    trace = []
    for iteration in range(1, cfg.t_local + 1):
        batch = data
        if cfg.batch_size != "full" and cfg.batch_size < data.n_samples:
            rows = np.sort(rng.generator.choice(data.n_samples, size=cfg.batch_size, replace=False))
            batch = data.rows(rows)
        with np.errstate(over="ignore", invalid="ignore"):
            report, grad = loss_and_gradient(params.with_theta(theta), batch, cfg.alpha)
        if not (np.isfinite(report.total) and np.all(np.isfinite(grad))):
            raise DivergenceError(device.device_id, iteration)
        trace.append(norm(grad))
        theta = np.where(data.mask, optimizer.step(theta, grad), params.theta)

    after = params.with_theta(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        report = local_objective(after, data, cfg.alpha)
    if not (np.isfinite(report.total) and np.all(np.isfinite(theta))):
        raise DivergenceError(device.device_id, cfg.t_local)
    return LocalUpdate(device.device_id, after, data.mask, device.sample_count, report, trace)


def aggregate(updates: list[LocalUpdate], topology: Topology, weight_scheme: WeightScheme) -> ModelParams:
    """
    Coordinate-wise weighted mean over the devices that train each coordinate.

    new[m] = sum_n w_n mask_n[m] params_n[m] / sum_n w_n mask_n[m], with w_n the sample
    count (sample-proportional) or 1 (uniform). Updates are reduced in device-id order.

    Raises:
        CoverageError: if some coordinate has no contributing device
    """
    if not updates:
        raise CoverageError(list(range(topology.global_dim)))
    updates = sorted(updates, key=lambda u: u.device_id)
    expected = sorted(shard.device_id for shard in topology.shards)
    if [u.device_id for u in updates] != expected:
        raise ValueError(f"expected one update per device {expected}, got {[u.device_id for u in updates]}")
    for update in updates:
        if not np.array_equal(update.mask, topology.mask(update.device_id)):
            raise ValueError(f"device {update.device_id} reported a mask that differs from the topology")

    weights = device_weights(updates, weight_scheme)
    denominator = np.zeros(topology.global_dim)
    for weight, update in zip(weights, updates):
        denominator += weight * update.mask
    uncovered = np.flatnonzero(denominator <= 0)
    if uncovered.size:
        raise CoverageError(uncovered.tolist())

    # mean written as an offset from the first update, so identical updates aggregate exactly
    reference = updates[0].params_after.theta
    theta = reference.copy()
    for weight, update in zip(weights, updates):
        share = weight * update.mask / denominator
        theta += share * (update.params_after.theta - reference)
    return updates[0].params_after.with_theta(theta)


def evaluate(params: ModelParams, split: Dataset | ShardData) -> EvalReport:
    """Mean sample loss (no regularizer) on a data split, plus accuracy for classifiers."""
    data = split if isinstance(split, ShardData) else ShardData.full(split, params.layout)
    loss = local_objective(params, data, 0.0).mean_sample_loss
    if params.model_kind is ModelKind.RIDGE:
        return EvalReport(loss)
    accuracy = float(np.mean(predict(params, data.X) == data.y.astype(np.int64)))
    return EvalReport(loss, accuracy)


def build_state(
    topology: Topology,
    train: Dataset,
    test: Dataset | None,
    layout: ParamLayout,
    cfg: TrainConfig,
    seed: int,
    init: ModelParams | None = None,
) -> FederationState:
    """Materialise device views and the global objective for a topology over `train`."""
    devices = [Device(shard, ShardData.from_shard(train, shard, layout)) for shard in topology.shards]
    objective = GlobalObjective(
        [device.data for device in devices], device_weights(devices, cfg.weight_scheme), cfg.alpha
    )
    params = init if init is not None else initialize(layout, cfg, seed)
    return FederationState(
        topology=topology,
        devices=devices,
        model=GlobalModel(params),
        objective=objective,
        train=ShardData.full(train, layout),
        test=ShardData.full(test, layout) if test is not None and test.n_samples else None,
        seed=seed,
    )


def run_round(
    state: FederationState, cfg: TrainConfig, logger: logging.Logger | None = None
) -> tuple[FederationState, RoundRecord]:
    """
    One synchronous round: measure at the broadcast point, train every device,
    aggregate, evaluate.

    Raises:
        DivergenceError: carrying the round index
    """
    logger = logger or log
    started = time.perf_counter()
    t = state.model.round + 1
    broadcast = state.model

    objective_before, grad, device_grads = state.objective.evaluate(broadcast.params.theta)
    sigma = gradient_variance(device_grads)

    def train_one(device: Device) -> LocalUpdate:
        return local_train(device, broadcast, cfg, RngStream(state.seed, STREAM_TRAIN, (t, device.device_id)))

    try:
        if cfg.max_workers > 1 and len(state.devices) > 1:
            with ThreadPoolExecutor(max_workers=cfg.max_workers) as executor:
                updates = list(executor.map(train_one, state.devices))
        else:
            updates = [train_one(device) for device in state.devices]
    except DivergenceError as e:
        raise e.at_round(t)

    params = aggregate(updates, state.topology, cfg.weight_scheme)
    if not np.all(np.isfinite(params.theta)):
        raise DivergenceError(-1, cfg.t_local, round=t)
    train_eval = evaluate(params, state.train)
    test_eval = evaluate(params, state.test) if state.test is not None else None
    objective_after = state.objective.value(params.theta)

    model = GlobalModel(
        params, t, train_eval.loss, test_eval.loss if test_eval is not None else None
    )
    record = RoundRecord(
        round=t,
        device_reports={update.device_id: update.report for update in updates},
        train_loss=train_eval.loss,
        test_loss=model.test_loss,
        train_accuracy=train_eval.accuracy,
        test_accuracy=test_eval.accuracy if test_eval is not None else None,
        objective_before=objective_before,
        objective=objective_after,
        grad_norm=norm(grad),
        sigma_hat=sigma,
        wall_time=time.perf_counter() - started,
    )
    logger.debug(
        f"round {t}: train_loss={record.train_loss:.6e} objective={objective_after:.6e} "
        f"grad_norm={record.grad_norm:.3e} sigma_hat={sigma:.3e}"
    )
    return replace(state, model=model), record


def run_federation(
    state: FederationState,
    cfg: TrainConfig,
    logger: logging.Logger | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> tuple[FederationState, list[RoundRecord]]:
    """
    Run `cfg.rounds` rounds from the state's initial model.

    Returns the final state and one RoundRecord per completed round; reruns with the
    same inputs are bit-identical.
    """
    logger = logger or log
    history: list[RoundRecord] = []
    for _ in range(cfg.rounds):
        state, record = run_round(state, cfg, logger)
        history.append(record)
        if on_round is not None:
            on_round(record)
        if record.round % max(1, cfg.rounds // 10) == 0 or record.round == cfg.rounds:
            logger.info(
                f"round {record.round}/{cfg.rounds} train_loss={record.train_loss:.6e}"
                + (f" test_loss={record.test_loss:.6e}" if record.test_loss is not None else "")
            )
    return state, history
