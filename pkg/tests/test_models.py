import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hovefl.core.data import Dataset, TaskKind, generate_regression
from hovefl.core.models import (
    GlobalObjective,
    ModelKind,
    ModelParams,
    ParamLayout,
    ShardData,
    local_gradient,
    local_objective,
    ridge_closed_form,
    ridge_quadratic,
    sample_loss,
)
from hovefl.core.numerics import finite_diff_gradient
from hovefl.utilities.errors import EmptyShardError, LabelError, SingularSystemError
from tests.utils import random_problem, seeds, vertical_shard


def test_layout_dimensions():
    assert ParamLayout(ModelKind.RIDGE, 5).dim == 6
    assert ParamLayout(ModelKind.LOGISTIC, 5, 2).dim == 6
    assert ParamLayout(ModelKind.LOGISTIC, 5, 4).dim == 24
    assert ParamLayout(ModelKind.MLP, 5, 3, hidden_width=7).dim == 5 * 7 + 7 + 7 * 3 + 3


def test_layout_roles_are_a_bijection():
    layout = ParamLayout(ModelKind.MLP, 3, 3, hidden_width=2)
    roles = [layout.role(c) for c in range(layout.dim)]
    assert len(set(roles)) == layout.dim
    assert layout.role(0) == ("W1", 0, 0)
    assert layout.role(layout.dim - 1) == ("b2", 2, 0)


def test_feature_mask_keeps_shared_blocks():
    layout = ParamLayout(ModelKind.LOGISTIC, 3, 3)
    mask = layout.feature_mask([1])
    assert mask.tolist() == [False] * 3 + [True] * 3 + [False] * 3 + [True] * 3
    mlp = ParamLayout(ModelKind.MLP, 3, 2, hidden_width=2)
    assert mlp.feature_mask([0]).sum() == 2 + 2 + 2 * 1 + 1


def test_sample_loss_perfect_ridge_prediction_is_zero():
    layout = ParamLayout(ModelKind.RIDGE, 2)
    params = ModelParams(np.array([2.0, -1.0, 0.5]), layout)
    assert sample_loss(params, np.array([1.0, 3.0]), 2.0 - 3.0 + 0.5) == 0.0


def test_sample_loss_uniform_softmax_is_log_k():
    layout = ParamLayout(ModelKind.LOGISTIC, 3, 4)
    params = ModelParams.zeros(layout)
    assert sample_loss(params, np.array([0.3, -1.0, 2.0]), 2) == pytest.approx(math.log(4), abs=1e-12)


def test_sample_loss_rejects_bad_label():
    layout = ParamLayout(ModelKind.LOGISTIC, 2, 3)
    with pytest.raises(LabelError):
        sample_loss(ModelParams.zeros(layout), np.zeros(2), 3)


def _scalar_mlp_loss(params, x, label):
    """Straight-line loops over units, no matrix algebra."""
    p = params.layout.unpack(params.theta)
    W1, b1, W2, b2 = p["W1"], p["b1"], p["W2"], p["b2"]
    hidden = []
    for j in range(W1.shape[1]):
        a = b1[j]
        for i in range(W1.shape[0]):
            a += x[i] * W1[i, j]
        hidden.append(math.tanh(a))
    logits = []
    for k in range(W2.shape[1]):
        z = b2[k]
        for j in range(len(hidden)):
            z += hidden[j] * W2[j, k]
        logits.append(z)
    if len(logits) == 1:
        z = logits[0]
        return math.log1p(math.exp(z)) - label * z
    top = max(logits)
    return top + math.log(sum(math.exp(z - top) for z in logits)) - logits[int(label)]


@pytest.mark.parametrize("k", [2, 3])
def test_mlp_loss_matches_scalar_implementation(k):
    gen = np.random.default_rng(k)
    layout = ParamLayout(ModelKind.MLP, 4, k, hidden_width=5)
    for _ in range(10):
        params = ModelParams(gen.normal(size=layout.dim), layout)
        x = gen.normal(size=4)
        label = int(gen.integers(0, k))
        assert sample_loss(params, x, label) == pytest.approx(_scalar_mlp_loss(params, x, label), abs=1e-10)


def test_local_objective_composition(regression_data, ridge_layout):
    data = ShardData.full(regression_data, ridge_layout)
    zero = ModelParams.zeros(ridge_layout)
    report = local_objective(zero, data, 0.0)
    assert report.total == report.mean_sample_loss
    assert report.total == pytest.approx(0.5 * np.mean(regression_data.y**2), rel=1e-12)

    theta = np.random.default_rng(0).normal(size=ridge_layout.dim)
    params = ModelParams(theta, ridge_layout)
    report = local_objective(params, data, 0.5)
    residual = regression_data.X @ theta[:-1] + theta[-1] - regression_data.y
    direct = np.mean(0.5 * residual**2) + 0.5 * 0.5 * theta @ theta
    assert report.total == pytest.approx(direct, rel=1e-12)
    assert report.total == report.mean_sample_loss + 0.5 * report.reg_value


def test_empty_shard_is_rejected(ridge_layout):
    with pytest.raises(EmptyShardError):
        ShardData(np.zeros((0, 4)), np.zeros(0), np.ones(ridge_layout.dim, dtype=bool), ridge_layout)


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-6)


@settings(max_examples=100, deadline=None)
@given(
    seed=seeds,
    kind=st.sampled_from([ModelKind.RIDGE, ModelKind.LOGISTIC, ModelKind.MLP]),
    k=st.sampled_from([2, 3]),
    alpha=st.sampled_from([0.0, 0.3, 1.0]),
)
def test_gradient_matches_finite_differences(seed, kind, k, alpha):
    params, data, _ = random_problem(kind, seed, k=k)
    analytic = local_gradient(params, data, alpha)
    numeric = finite_diff_gradient(lambda t: local_objective(params.with_theta(t), data, alpha).total, params.theta)
    assert _relative_error(analytic, numeric) < 1e-5


@pytest.mark.parametrize("kind", [ModelKind.RIDGE, ModelKind.LOGISTIC, ModelKind.MLP])
def test_vertical_gradient_is_zero_off_mask(kind):
    params, _, ds = random_problem(kind, 1, f=4)
    data = vertical_shard(ds, params.layout, [0, 2])
    grad = local_gradient(params, data, 0.5)
    assert np.all(grad[~data.mask] == 0.0)
    assert np.any(grad[data.mask] != 0.0)
    assert data.X[:, 1].tolist() == [0.0] * ds.n_samples


def test_closed_form_recovers_noiseless_weights():
    ds = generate_regression(40, 5, 0.0, seed=9)
    params, f_star = ridge_closed_form(ds, 0.0)
    np.testing.assert_allclose(params.theta[:-1], ds.metadata["w_true"], atol=1e-8)
    assert abs(params.theta[-1]) < 1e-8
    assert f_star == pytest.approx(0.0, abs=1e-14)


def test_closed_form_is_stationary_and_minimal():
    ds = generate_regression(20, 5, 0.5, seed=1)
    params, f_star = ridge_closed_form(ds, 0.1)
    data = ShardData.full(ds, params.layout)
    assert np.linalg.norm(local_gradient(params, data, 0.1)) < 1e-8
    gen = np.random.default_rng(1)
    for _ in range(1000):
        probe = params.with_theta(params.theta + gen.normal(size=params.layout.dim))
        assert local_objective(probe, data, 0.1).total >= f_star


def test_closed_form_shrinks_under_large_alpha():
    ds = generate_regression(30, 3, 0.1, seed=2)
    small, _ = ridge_closed_form(ds, 0.01)
    large, _ = ridge_closed_form(ds, 1e6)
    assert np.linalg.norm(large.theta) < 1e-4 * np.linalg.norm(small.theta)


def test_closed_form_singular_without_regularization():
    X = np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    ds = Dataset(X, np.array([1.0, 2.0, 3.0]), ["a", "b", "c"], ["f0", "f1"], TaskKind.REGRESSION)
    with pytest.raises(SingularSystemError, match="alpha > 0"):
        ridge_closed_form(ds, 0.0)
    ridge_closed_form(ds, 0.1)


@settings(max_examples=100, deadline=None)
@given(seed=seeds, kind=st.sampled_from([ModelKind.RIDGE, ModelKind.LOGISTIC]), lam=st.floats(0.0, 1.0))
def test_convexity_witness(seed, kind, lam):
    params, data, _ = random_problem(kind, seed)
    gen = np.random.default_rng(seed)
    a = gen.normal(size=params.layout.dim)
    b = gen.normal(size=params.layout.dim)

    def F(theta):
        return local_objective(params.with_theta(theta), data, 0.2).total

    assert F(lam * a + (1 - lam) * b) <= lam * F(a) + (1 - lam) * F(b) + 1e-12


@settings(max_examples=100, deadline=None)
@given(seed=seeds)
def test_ridge_pl_witness(seed):
    params, data, _ = random_problem(ModelKind.RIDGE, seed, n=12)
    form = ridge_quadratic(data, 0.1)
    rho = form.eigenvalues[0]
    f_star = form.value(form.minimizer())
    theta = np.random.default_rng(seed).normal(size=params.layout.dim) * 3
    grad = local_gradient(params.with_theta(theta), data, 0.1)
    gap = local_objective(params.with_theta(theta), data, 0.1).total - f_star
    assert grad @ grad >= 2 * rho * gap - 1e-9 * max(1.0, abs(gap))


def test_quadratic_form_matches_objective(regression_data, ridge_layout):
    data = ShardData.full(regression_data, ridge_layout)
    form = ridge_quadratic(data, 0.3)
    theta = np.random.default_rng(3).normal(size=ridge_layout.dim)
    params = ModelParams(theta, ridge_layout)
    assert form.value(theta) == pytest.approx(local_objective(params, data, 0.3).total, rel=1e-12)
    np.testing.assert_allclose(form.gradient(theta), local_gradient(params, data, 0.3), rtol=1e-10, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=seeds)
def test_regularizer_is_non_negative(seed):
    params, data, _ = random_problem(ModelKind.LOGISTIC, seed)
    low = local_objective(params, data, 0.0)
    high = local_objective(params, data, 1.0)
    assert high.reg_value >= 0
    assert high.total >= low.total


def test_global_objective_is_weighted_mixture(regression_data, ridge_layout):
    full = ShardData.full(regression_data, ridge_layout)
    half = full.rows(np.arange(30))
    objective = GlobalObjective([full, half], [3.0, 1.0], 0.1)
    theta = np.random.default_rng(0).normal(size=ridge_layout.dim)
    params = ModelParams(theta, ridge_layout)
    expected = 0.75 * local_objective(params, full, 0.1).total + 0.25 * local_objective(params, half, 0.1).total
    assert objective.value(theta) == pytest.approx(expected, rel=1e-12)
    form = objective.quadratic_form()
    assert form.value(theta) == pytest.approx(expected, rel=1e-10)
    value, grad, device_grads = objective.evaluate(theta)
    assert value == objective.value(theta)
    np.testing.assert_array_equal(grad, objective.gradient(theta))
    assert len(device_grads) == 2


def test_params_json_keeps_layout():
    layout = ParamLayout(ModelKind.MLP, 2, 3, hidden_width=2)
    params = ModelParams(np.arange(layout.dim, dtype=np.float64), layout)
    restored = ModelParams.from_json(params.to_json())
    assert restored.layout == layout
    np.testing.assert_array_equal(restored.theta, params.theta)
