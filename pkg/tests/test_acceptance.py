"""Acceptance gate: fast property criteria 1-7, desk-scale spirals runs for 8-11.

Criteria 8-11 run the shipped ``configs/spirals.toml`` (1-NN oracle on a
standardized one-turn spiral, n = 100, lr = 5e-4, batch 32, lambda0 = 0.5,
1000-epoch cap per iteration) over 10 seeds. Pure-sequential and online runs
stop at t = 15, which is all criteria 8, 9 and 11 look at; a shorter run is an
exact prefix of a longer one with the same seed.
"""

from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from conftest import record_criterion

from seqcopy import harness
from seqcopy.copynet import Architecture, CopyNet, _forward_params, _loss_grad, forward, rho_batch, uncertainty_rho
from seqcopy.datagen import LabeledDataset, Sampler
from seqcopy.engine import LambdaState, SyntheticSet, filter_step, run_online, run_pure_sequential, run_sequential, update_lambda
from seqcopy.metrics import check_theorem_convergence, conv_metric, eff_metric
from seqcopy.oracle import make_nn_oracle

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "spirals.toml"
SEEDS = 10
STEADY_WINDOW = 10  # steady-state set size: mean over the last 10 iterations


# -- 1-7: properties -----------------------------------------------------------------


def test_criterion_01_rho_examples():
    got = [uncertainty_rho((1, 0), (1, 0)), uncertainty_rho((0, 1), (1, 0)), uncertainty_rho((0.5, 0.5), (1, 0))]
    ok = all(abs(g - e) <= 1e-12 for g, e in zip(got, [0.0, 1.0, 0.5]))
    assert record_criterion(1, ok, f"rho = {got}")


def _micro_loss(arch, params, x, y, prev, lam):
    probs = _forward_params(arch, params, x)
    loss = np.sum((probs - y) ** 2) / (arch.n_classes * len(x))
    return loss + (lam * np.linalg.norm(params - prev) if lam else 0.0)


def test_criterion_02_gradient_check():
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        widths = [(4, 3), (5,), (3, 3, 2)][seed % 3]
        arch = Architecture(int(rng.integers(2, 4)), widths, 3)
        assert arch.n_params <= 100
        params = rng.normal(scale=0.8, size=arch.n_params)
        prev = params + rng.normal(scale=0.3, size=arch.n_params)
        x = rng.normal(size=(12, arch.d))
        y = np.eye(3)[rng.integers(3, size=12)]
        for lam in (0.0, 0.4):
            _, grad = _loss_grad(arch, params, x, y, prev, lam)
            fd = np.empty_like(params)
            for k in range(len(params)):
                e = np.zeros_like(params)
                e[k] = 1e-5
                fd[k] = (_micro_loss(arch, params + e, x, y, prev, lam) - _micro_loss(arch, params - e, x, y, prev, lam)) / 2e-5
            worst = max(worst, np.max(np.abs(grad - fd)) / max(np.max(np.abs(fd)), 1e-12))
    assert record_criterion(2, worst < 1e-4, f"max relative error {worst:.2e} over 20 nets x (with, without) memory term")


def test_criterion_03_filter_vs_brute_force():
    mismatches, checked = 0, 0
    for case in range(100):
        rng = np.random.default_rng(case)
        d, nc = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        oracle = make_nn_oracle(LabeledDataset(rng.normal(size=(25, d)), np.arange(25) % nc, nc))
        net = CopyNet.init(d, nc, widths=(int(rng.integers(2, 7)),), rng_seed=case)
        prev_x = rng.normal(size=(int(rng.integers(0, 30)), d))
        prev = SyntheticSet(prev_x, oracle.predict_onehot(prev_x)) if len(prev_x) else SyntheticSet.empty(d, nc)
        n = int(rng.integers(1, 50))
        probe = rho_batch(forward(net, rng.normal(size=(40, d))), np.eye(nc)[rng.integers(nc, size=40)])
        delta = float(rng.choice(probe))
        seed = int(rng.integers(2**32))
        out = filter_step(prev, n, delta, Sampler(d), oracle, net, np.random.default_rng(seed), floor=0)

        fresh = Sampler(d).draw(n, np.random.default_rng(seed))
        pool_x = np.vstack([prev.points, fresh])
        pool_y = np.vstack([prev.onehot, oracle.predict_onehot(fresh)])
        keep = []
        for i in range(len(pool_x)):
            p = forward(net, pool_x[i : i + 1])[0]
            if np.sqrt(np.sum((p - pool_y[i]) ** 2) / nc) >= delta:
                keep.append(i)
        checked += 1
        if not (len(out) == len(keep) and np.array_equal(out.points, pool_x[keep])):
            mismatches += 1
    assert record_criterion(3, mismatches == 0, f"{checked - mismatches}/{checked} instances identical")


def test_criterion_04_metric_identities():
    vals = {
        "conv(constant)": (conv_metric([0.7] * 31), 1.0, 1e-12),
        "conv(ramp)": (conv_metric(np.linspace(0, 1, 31)), 0.5, 1e-12),
        "eff(n*t)": (eff_metric([100 * t for t in range(31)], 100), 0.0, 1e-12),
        "eff(200)": (eff_metric([200] * 31, 100), 0.8667, 1e-4),
    }
    ok = all(abs(v - e) <= tol for v, e, tol in vals.values())
    detail = ", ".join(f"{k}={v:.6f}" for k, (v, _, _) in vals.items())
    assert record_criterion(4, ok, detail)


def test_criterion_05_lambda_bookkeeping():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(500):
        sizes = rng.integers(0, 1000, size=int(rng.integers(1, 40)))
        state, k, m = LambdaState(0.5, int(rng.integers(0, 1000))), 0, 0
        prev = state.prev_size
        for s in sizes:
            state = update_lambda(state, int(s))
            k, m = (k + 1, m) if s >= prev else (k, m + 1)
            prev = s
        if Fraction(state.lam) != Fraction(1, 2) * Fraction(1, 2) ** k * Fraction(3, 2) ** m:
            bad += 1
    assert record_criterion(5, bad == 0, f"{500 - bad}/500 random sequences exact")


def test_criterion_06_theorem_checker():
    failures = 0
    for case in range(100):
        rng = np.random.default_rng(case)
        n_pts = int(rng.integers(1, 80))
        rho_sq = rng.random((int(rng.integers(1, 40)), n_pts)) * rng.choice([0.2, 1.0, 4.0])
        sizes = sorted(set(rng.integers(0, n_pts, size=int(rng.integers(1, 6))).tolist()) | {n_pts})
        rep = check_theorem_convergence(rho_sq, gamma=float(rng.uniform(0.1, 3.0)), sizes=sizes)
        if not (rep.all_bounds_hold and rep.argmax[-1] == rep.full_argmax and rep.stabilized):
            failures += 1
    assert record_criterion(6, failures == 0, f"{100 - failures}/100 instances satisfy the bound and stabilize")


# -- spirals runs ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def spirals():
    cfg = harness.load_config(CONFIG)
    oracle, test = harness.build_problem(cfg)
    return cfg, oracle, test


def test_criterion_07_sequential_degenerates_to_pure(spirals):
    cfg, oracle, test = spirals
    same = True
    for rep in range(3):
        run_cfg = replace(cfg.run, T=5, epochs=50, delta=0.0, lambda0=0.0, auto_lambda=False, seed=rep)
        a = run_sequential(run_cfg, oracle, test)
        b = run_pure_sequential(run_cfg, oracle, test)
        same &= a.to_csv() == b.to_csv() and np.array_equal(a.net.params, b.net.params)
    assert record_criterion(7, same, "3 seeds, records and final parameters bit-identical")


@pytest.fixture(scope="module")
def desk_runs(spirals):
    cfg, oracle, test = spirals
    out = {"pure": [], "online": [], "seq": []}
    for rep in range(SEEDS):
        for key, strategy, fn, T, delta in (
            ("pure", "pure-sequential", run_pure_sequential, 15, 0.0),
            ("online", "online", run_online, 15, 0.0),
            ("seq", "sequential", run_sequential, 30, 1e-6),
        ):
            seed = harness.derive_seed(cfg.master_seed, strategy, delta, rep)
            run_cfg = replace(cfg.run, T=T, strategy=strategy, delta=delta, seed=seed)
            out[key].append(fn(run_cfg, oracle, test))
    return out


def _mean_at(records, attr, t):
    return float(np.mean([getattr(r, attr)[t] for r in records]))


@pytest.mark.acceptance
def test_criterion_08_pure_sequential_accuracy(desk_runs):
    a5, a10 = _mean_at(desk_runs["pure"], "accuracy", 5), _mean_at(desk_runs["pure"], "accuracy", 10)
    ok = a5 >= 0.85 and a10 >= 0.95
    assert record_criterion(8, ok, f"pure-sequential mean accuracy t=5: {a5:.4f} (>= 0.85), t=10: {a10:.4f} (>= 0.95)")


@pytest.mark.acceptance
def test_criterion_09_online_slower(desk_runs):
    online, pure = _mean_at(desk_runs["online"], "accuracy", 5), _mean_at(desk_runs["pure"], "accuracy", 5)
    assert record_criterion(9, online < pure, f"mean accuracy at t=5: online {online:.4f} < pure-sequential {pure:.4f}")


@pytest.mark.acceptance
def test_criterion_10_full_sequential(desk_runs):
    runs = desk_runs["seq"]
    acc = _mean_at(runs, "accuracy", 30)
    steady = float(np.mean([np.mean(r.set_size[-STEADY_WINDOW:]) for r in runs]))
    eff = float(np.mean([r.eff() for r in runs]))
    ok = acc > 0.90 and steady <= 400 and eff >= 0.6
    detail = f"accuracy t=30: {acc:.4f} (> 0.90), steady |S_t|: {steady:.1f} (<= 400), eff: {eff:.4f} (>= 0.6)"
    assert record_criterion(10, ok, detail)


@pytest.mark.acceptance
def test_criterion_11_uncertainty_ordering(desk_runs):
    pure, online = _mean_at(desk_runs["pure"], "mean_rho", 15), _mean_at(desk_runs["online"], "mean_rho", 15)
    assert record_criterion(11, pure < online, f"mean rho at t=15: pure-sequential {pure:.4f} < online {online:.4f}")
