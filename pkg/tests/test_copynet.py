import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqcopy._kernels import adam_steps
from seqcopy.copynet import (
    Architecture,
    CapacityBudget,
    CopyNet,
    EpsilonSchedule,
    OptimizerState,
    _loss_grad,
    adam_step,
    balanced_batches,
    empirical_risk,
    forward,
    gradient,
    loss_with_memory,
    memory_distance,
    rho_batch,
    train_capacity_loop,
    uncertainty_rho,
)
from seqcopy.engine import SyntheticSet


def _random_set(n, d, n_classes, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n_classes, n)
    return SyntheticSet(rng.normal(size=(n, d)), np.eye(n_classes)[labels])


# -- uncertainty ------------------------------------------------------------------


@pytest.mark.parametrize(
    "probs,label,expected",
    [((1, 0), (1, 0), 0.0), ((0, 1), (1, 0), 1.0), ((0.5, 0.5), (1, 0), 0.5)],
)
def test_rho_examples(probs, label, expected):
    assert abs(uncertainty_rho(probs, label) - expected) <= 1e-12


def test_rho_three_class_uniform():
    assert abs(uncertainty_rho([1 / 3] * 3, [1, 0, 0]) - math.sqrt(2) / 3) < 1e-12


def test_rho_length_mismatch():
    with pytest.raises(ValueError):
        uncertainty_rho([0.5, 0.5], [1, 0, 0])


@given(st.integers(2, 6), st.integers(0, 10_000))
@settings(max_examples=100, deadline=None)
def test_rho_bounded(n_classes, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_classes))
    y = np.eye(n_classes)[rng.integers(n_classes)]
    r = uncertainty_rho(p, y)
    assert 0.0 <= r <= math.sqrt(2 / n_classes) + 1e-12


def test_rho_batch_matches_scalar():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(3), size=20)
    y = np.eye(3)[rng.integers(3, size=20)]
    np.testing.assert_allclose(rho_batch(p, y), [uncertainty_rho(a, b) for a, b in zip(p, y)], rtol=0, atol=1e-15)


# -- network --------------------------------------------------------------------


def test_default_architecture_shapes():
    net = CopyNet.init(2, 2, rng_seed=0)
    assert net.arch.layer_sizes == [(2, 64), (64, 32), (32, 10), (10, 2)]
    assert net.arch.n_params == 2 * 64 + 64 + 64 * 32 + 32 + 32 * 10 + 10 + 10 * 2 + 2


def test_forward_rows_are_distributions():
    net = CopyNet.init(3, 4, widths=(5,), rng_seed=2)
    probs = forward(net, np.random.default_rng(0).normal(size=(50, 3)) * 100)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_zero_params_give_uniform_output():
    net = CopyNet.zeros(2, 4, widths=(3,))
    np.testing.assert_allclose(forward(net, [[1.0, -2.0]]), [[0.25] * 4])


def test_forward_matches_manual_computation():
    arch = Architecture(2, (3,), 2)
    params = np.random.default_rng(5).normal(size=arch.n_params)
    net = CopyNet(arch, params)
    (w1, b1), (w2, b2) = arch.split(params)
    x = np.array([[0.3, -0.7], [1.1, 0.2]])
    z = np.maximum(x @ w1 + b1, 0) @ w2 + b2
    expected = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(forward(net, x), expected, rtol=1e-13)


def test_serialization_roundtrips():
    net = CopyNet.init(2, 3, widths=(4, 3), rng_seed=9)
    assert CopyNet.from_json(net.to_json()) == net
    assert CopyNet.from_bytes(net.to_bytes()) == net
    with pytest.raises(ValueError):
        CopyNet.from_bytes(b"XXXX" + net.to_bytes()[4:])


def test_init_is_seeded():
    assert CopyNet.init(2, 2, rng_seed=4) == CopyNet.init(2, 2, rng_seed=4)
    assert not CopyNet.init(2, 2, rng_seed=4) == CopyNet.init(2, 2, rng_seed=5)


# -- loss -----------------------------------------------------------------------


def test_lambda_zero_loss_is_risk_exactly():
    net = CopyNet.init(2, 3, widths=(4,), rng_seed=0)
    prev = CopyNet.init(2, 3, widths=(4,), rng_seed=1)
    s = _random_set(10, 2, 3, 0)
    assert loss_with_memory(net, s, prev, 0.0) == empirical_risk(net, s)


def test_loss_at_previous_params_is_risk():
    net = CopyNet.init(2, 3, widths=(4,), rng_seed=0)
    s = _random_set(10, 2, 3, 0)
    assert loss_with_memory(net, s, net.copy(), 0.7) == empirical_risk(net, s)


def test_risk_equals_mean_rho_squared():
    net = CopyNet.init(2, 3, widths=(4,), rng_seed=3)
    s = _random_set(25, 2, 3, 1)
    rho = rho_batch(forward(net, s.points), s.onehot)
    assert abs(empirical_risk(net, s) - np.mean(rho**2)) < 1e-15


def test_empty_set_rejected():
    net = CopyNet.init(2, 2, widths=(3,), rng_seed=0)
    with pytest.raises(ValueError, match="empty"):
        empirical_risk(net, SyntheticSet.empty(2, 2))


def test_mismatched_architecture_rejected():
    a = CopyNet.init(2, 2, widths=(3,), rng_seed=0)
    b = CopyNet.init(2, 2, widths=(4,), rng_seed=0)
    with pytest.raises(ValueError, match="architecture"):
        memory_distance(a, b)


# -- gradient oracle: central finite differences -------------------------------------


def _loss_only(arch, params, x, y, prev, lam):
    from seqcopy.copynet import _forward_params

    probs = _forward_params(arch, params, x)
    loss = np.sum((probs - y) ** 2) / (arch.n_classes * len(x))
    if lam:
        loss += lam * np.linalg.norm(params - prev)
    return loss


@pytest.mark.parametrize("with_memory", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed, with_memory):
    rng = np.random.default_rng(seed)
    arch = Architecture(2, (4, 3), 3)
    assert arch.n_params <= 100
    params = rng.normal(scale=0.8, size=arch.n_params)
    prev = params + rng.normal(scale=0.3, size=arch.n_params)
    lam = 0.5 if with_memory else 0.0
    x = rng.normal(size=(16, 2))
    y = np.eye(3)[rng.integers(3, size=16)]

    loss, grad = _loss_grad(arch, params, x, y, prev, lam)
    assert abs(loss - _loss_only(arch, params, x, y, prev, lam)) < 1e-14
    fd = np.empty_like(params)
    h = 1e-5
    for k in range(len(params)):
        up, dn = params.copy(), params.copy()
        up[k] += h
        dn[k] -= h
        fd[k] = (_loss_only(arch, up, x, y, prev, lam) - _loss_only(arch, dn, x, y, prev, lam)) / (2 * h)
    rel = np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12)
    assert rel < 1e-4


def test_memory_gradient_zero_at_equality():
    net = CopyNet.init(2, 2, widths=(3,), rng_seed=0)
    s = _random_set(8, 2, 2, 0)
    np.testing.assert_array_equal(gradient(net, s, net.copy(), 3.0), gradient(net, s))


def test_public_gradient_uses_whole_set():
    net = CopyNet.init(2, 3, widths=(4,), rng_seed=1)
    s = _random_set(12, 2, 3, 2)
    _, ref = _loss_grad(net.arch, net.params, s.points, s.onehot)
    np.testing.assert_allclose(gradient(net, s), ref, rtol=0, atol=0)


# -- compiled kernel vs reference -------------------------------------------------


def _reference_steps(arch, params, opt, x, y, batches, prev, lam):
    from seqcopy.copynet import _adam_inplace

    for rows in batches:
        _, g = _loss_grad(arch, params, x[rows], y[rows], prev if lam else None, lam)
        _adam_inplace(params, g, opt)


@pytest.mark.parametrize("lam", [0.0, 0.3])
@pytest.mark.parametrize("widths", [(5,), (6, 4), (8, 5, 3)])
def test_kernel_matches_reference(widths, lam):
    rng = np.random.default_rng(len(widths))
    arch = Architecture(2, widths, 3)
    net = CopyNet.init(2, 3, widths=widths, rng_seed=1)
    x = rng.normal(size=(40, 2))
    y = np.eye(3)[rng.integers(3, size=40)]
    prev = net.params + rng.normal(scale=0.1, size=arch.n_params)
    batches = rng.integers(0, 40, size=(25, 8))

    ref_params, ref_opt = net.params.copy(), OptimizerState.fresh(net)
    _reference_steps(arch, ref_params, ref_opt, x, y, batches, prev, lam)

    params, opt = net.params.copy(), OptimizerState.fresh(net)
    dims = np.array((2, *widths, 3), dtype=np.int64)
    step = adam_steps(params, opt.m, opt.v, 0, opt.lr, opt.beta1, opt.beta2, opt.eps, dims, x, y, batches, prev, lam)
    assert step == ref_opt.step == 25
    np.testing.assert_allclose(params, ref_params, rtol=0, atol=1e-12)
    np.testing.assert_allclose(opt.m, ref_opt.m, rtol=0, atol=1e-12)


# -- Adam -----------------------------------------------------------------------


def test_adam_first_step_magnitude():
    net = CopyNet.zeros(1, 2, widths=(2,))
    opt = OptimizerState.fresh(net, lr=5e-4)
    g = np.linspace(-1, 1, net.arch.n_params)
    new, opt2 = adam_step(net, g, opt)
    # bias-corrected first step moves each nonzero coordinate by lr * sign(g)
    moved = new.params - net.params
    nz = np.abs(g) > 1e-3
    np.testing.assert_allclose(moved[nz], -5e-4 * np.sign(g[nz]), rtol=1e-3)
    assert opt2.step == 1 and opt.step == 0


def test_adam_zero_gradient_keeps_params():
    net = CopyNet.init(2, 2, widths=(3,), rng_seed=0)
    new, _ = adam_step(net, np.zeros(net.arch.n_params), OptimizerState.fresh(net))
    assert new == net


def test_adam_shape_mismatch():
    net = CopyNet.init(2, 2, widths=(3,), rng_seed=0)
    with pytest.raises(ValueError):
        adam_step(net, np.zeros(3), OptimizerState.fresh(net))


# -- schedules ------------------------------------------------------------------


def test_epsilon_trace_max_rule():
    tr = EpsilonSchedule(target=1e-3).trace(12)
    assert tr[:3] == [0.5, 0.25, 0.125]
    assert tr[-1] == 1e-3
    assert all(b <= a for a, b in zip(tr, tr[1:]))


def test_epsilon_literal_min_rule():
    assert EpsilonSchedule(target=1e-3, literal_min=True).trace(2) == [1e-3, 5e-4]


def test_epsilon_rejects_bad_values():
    with pytest.raises(ValueError):
        EpsilonSchedule(target=0.0)


def test_budget_growth_and_cap():
    b = CapacityBudget(allowance=10, growth=2.0, cap=100)
    seq = []
    for _ in range(5):
        seq.append(b.allowance)
        b = b.grow()
    assert seq == [10, 20, 40, 80, 100]


def test_balanced_batches():
    labels = np.array([0] * 90 + [1] * 10)
    rows = balanced_batches(labels, 2, 32, np.random.default_rng(0))(50)
    assert rows.shape == (50, 32)
    assert np.all(np.sum(labels[rows] == 1, axis=1) == 16)


def test_balanced_batches_missing_class():
    labels = np.zeros(20, dtype=int)
    rows = balanced_batches(labels, 3, 32, np.random.default_rng(0))(2)
    assert rows.shape == (2, 32)


# -- training -------------------------------------------------------------------


def test_training_returns_immediately_below_target():
    net = CopyNet.init(2, 2, widths=(4,), rng_seed=0)
    s = _random_set(10, 2, 2, 0)
    risk = empirical_risk(net, s)
    out, diag = train_capacity_loop(net, s, EpsilonSchedule(target=risk * 2, initial=1.0), CapacityBudget())
    assert out == net and diag.epochs == 0 and diag.reached_target


def test_training_reduces_risk_and_respects_cap():
    s = _random_set(64, 2, 2, 3)
    s = SyntheticSet(s.points, np.eye(2)[(s.points[:, 0] > 0).astype(int)])
    net = CopyNet.init(2, 2, widths=(16, 8), rng_seed=1)
    out, diag = train_capacity_loop(net, s, EpsilonSchedule(target=1e-6), CapacityBudget(5, 2.0, 40), rng_seed=0, lr=5e-3)
    assert diag.epochs <= 40
    assert empirical_risk(out, s) == diag.best_risk < diag.initial_risk
    assert all(b <= a for a, b in zip(diag.best_risk_trace, diag.best_risk_trace[1:]))


def test_training_deterministic():
    s = _random_set(40, 2, 3, 0)
    net = CopyNet.init(2, 3, widths=(8,), rng_seed=0)
    args = (s, EpsilonSchedule(), CapacityBudget(3, 2.0, 12))
    a, _ = train_capacity_loop(net, *args, rng_seed=7)
    b, _ = train_capacity_loop(net, *args, rng_seed=7)
    assert a == b


def test_training_input_net_untouched():
    s = _random_set(40, 2, 2, 0)
    net = CopyNet.init(2, 2, widths=(8,), rng_seed=0)
    before = net.params.copy()
    train_capacity_loop(net, s, EpsilonSchedule(), CapacityBudget(2, 2.0, 4), rng_seed=0)
    np.testing.assert_array_equal(net.params, before)


def test_large_lambda_keeps_params_near_previous():
    s = _random_set(40, 2, 2, 0)
    net = CopyNet.init(2, 2, widths=(8,), rng_seed=0)
    free, _ = train_capacity_loop(net, s, EpsilonSchedule(), CapacityBudget(5, 2.0, 20), rng_seed=0, lr=1e-2)
    held, _ = train_capacity_loop(
        net, s, EpsilonSchedule(), CapacityBudget(5, 2.0, 20), theta_prev=net, lam=50.0, rng_seed=0, lr=1e-2
    )
    assert memory_distance(held, net) < memory_distance(free, net)
