"""Copying strategies.

``run_sequential`` alternates a sample-selection step (draw fresh oracle-labelled
points, drop those the current copy already reproduces) with a memory-aware
training step warm-started from the previous parameters, adapting the memory
weight from the set-size trend. ``run_pure_sequential``, ``run_online`` and
``run_single_pass`` are the baselines.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .copynet import (
    DEFAULT_WIDTHS,
    CapacityBudget,
    CopyNet,
    EpsilonSchedule,
    OptimizerState,
    net_rho,
    train_capacity_loop,
)
from .datagen import LabeledDataset, Sampler
from .metrics import conv_metric, copy_accuracy, eff_metric
from .oracle import Oracle

log = logging.getLogger(__name__)

STRATEGIES = ("sequential", "pure-sequential", "online", "single-pass")


@dataclass
class SyntheticSet:
    """Oracle-labelled synthetic points with uncertainties cached against one parameter snapshot."""

    points: np.ndarray
    onehot: np.ndarray
    rho: np.ndarray | None = None

    def __post_init__(self):
        if len(self.points) != len(self.onehot):
            raise ValueError("points and labels differ in length")
        if self.rho is not None and len(self.rho) != len(self.points):
            raise ValueError("cached rho has the wrong length")

    def __len__(self):
        return len(self.points)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.onehot, axis=1)

    @classmethod
    def empty(cls, d: int, n_classes: int) -> "SyntheticSet":
        return cls(np.empty((0, d)), np.empty((0, n_classes)), np.empty(0))

    def append(self, other: "SyntheticSet") -> "SyntheticSet":
        return SyntheticSet(
            np.vstack([self.points, other.points]),
            np.vstack([self.onehot, other.onehot]),
        )

    def subset(self, idx) -> "SyntheticSet":
        return SyntheticSet(self.points[idx], self.onehot[idx], None if self.rho is None else self.rho[idx])

    def refresh_rho(self, net: CopyNet) -> "SyntheticSet":
        return SyntheticSet(self.points, self.onehot, net_rho(net, self.points, self.onehot))

    def mean_rho(self) -> float:
        if self.rho is None or len(self.rho) == 0:
            return float("nan")
        return float(np.mean(self.rho))


def draw_labelled(n: int, sampler: Sampler, oracle: Oracle, rng: np.random.Generator) -> SyntheticSet:
    if sampler.d != oracle.d:
        raise ValueError(f"sampler dimension {sampler.d} does not match oracle dimension {oracle.d}")
    points = sampler.draw(n, rng)
    return SyntheticSet(points, oracle.predict_onehot(points))


def filter_step(
    prev: SyntheticSet,
    n: int,
    delta: float,
    sampler: Sampler,
    oracle: Oracle,
    net: CopyNet,
    rng: np.random.Generator,
    floor: int = 32,
) -> SyntheticSet:
    """Append ``n`` fresh labelled points to ``prev`` and keep those with ``rho >= delta``.

    ``rho`` is evaluated with ``net`` and cached on the result. Input order is
    preserved. If fewer than ``floor`` points survive, the ``floor``
    highest-``rho`` points are kept instead (ties favour earlier points).
    """
    if delta < 0:
        raise ValueError("delta must be non-negative")
    pool = prev.append(draw_labelled(n, sampler, oracle, rng)).refresh_rho(net)
    keep = pool.rho >= delta
    if keep.sum() < min(floor, len(pool)):
        top = np.argsort(-pool.rho, kind="stable")[:floor]
        keep = np.zeros(len(pool), dtype=bool)
        keep[top] = True
    return pool.subset(np.flatnonzero(keep))


@dataclass(frozen=True)
class LambdaState:
    lam: float
    prev_size: int

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lambda must stay strictly positive")


def update_lambda(state: LambdaState, current_size: int) -> LambdaState:
    """Halve lambda when the working set did not shrink, otherwise multiply it by 1.5."""
    if current_size < 0:
        raise ValueError("set size must be non-negative")
    lam = state.lam / 2 if current_size >= state.prev_size else state.lam * 1.5
    return LambdaState(lam, current_size)


@dataclass(frozen=True)
class RunConfig:
    """Parameters of one copying run.

    ``epochs`` caps the training epochs per iteration; ``initial_epochs`` is
    the first stage's allowance inside that cap. ``lambda0 = 0`` together with
    ``auto_lambda = False`` disables the memory term.
    """

    T: int = 30
    n: int = 100
    delta: float = 1e-6
    lambda0: float = 0.5
    auto_lambda: bool = True
    eps_target: float = 1e-3
    eps_initial: float = 1.0
    literal_min: bool = False
    lr: float = 5e-4
    epochs: int = 100
    initial_epochs: int = 10
    growth: float = 2.0
    batch: int = 32
    floor: int = 32
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    sampler: str = "normal"
    sampler_low: float = -1.0
    sampler_high: float = 1.0
    seed: int = 0
    strategy: str = "sequential"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        problems = []
        if self.T < 0:
            problems.append("T must be >= 0")
        if self.n < 1:
            problems.append("n must be >= 1")
        if self.delta < 0:
            problems.append("delta must be >= 0")
        if self.lambda0 < 0 or (self.auto_lambda and self.lambda0 == 0):
            problems.append("lambda0 must be > 0 (or 0 with auto_lambda off)")
        if self.strategy not in STRATEGIES:
            problems.append(f"strategy must be one of {STRATEGIES}")
        if self.epochs < 1 or self.initial_epochs < 1 or self.batch < 1:
            problems.append("epochs, initial_epochs and batch must be >= 1")
        if problems:
            raise ValueError("invalid RunConfig: " + "; ".join(problems))

    def make_sampler(self, d: int) -> Sampler:
        return Sampler(d, self.sampler, self.sampler_low, self.sampler_high)

    def schedule(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_target, self.eps_initial, literal_min=self.literal_min)

    def budget(self) -> CapacityBudget:
        return CapacityBudget(self.initial_epochs, self.growth, self.epochs)


@dataclass
class RunRecord:
    strategy: str
    config: RunConfig
    accuracy: list[float] = field(default_factory=list)
    mean_rho: list[float] = field(default_factory=list)
    set_size: list[int] = field(default_factory=list)
    lam: list[float] = field(default_factory=list)
    epochs: list[int] = field(default_factory=list)
    net: CopyNet | None = None
    wall_time: float = 0.0

    def log_iteration(self, acc, sset: SyntheticSet, lam, epochs):
        self.accuracy.append(float(acc))
        self.mean_rho.append(sset.mean_rho())
        self.set_size.append(len(sset))
        self.lam.append(float(lam))
        self.epochs.append(int(epochs))

    @property
    def final_accuracy(self) -> float:
        return self.accuracy[-1]

    def conv(self) -> float | None:
        if len(self.accuracy) < 2:
            return None
        return conv_metric(self.accuracy)

    def eff(self) -> float:
        if len(self.set_size) < 2:
            return 0.0
        return eff_metric(self.set_size, self.config.n)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "accuracy", "mean_rho", "set_size", "lambda"])
        for t, row in enumerate(zip(self.accuracy, self.mean_rho, self.set_size, self.lam)):
            acc, rho, size, lam = row
            w.writerow([t, repr(acc), repr(rho), size, repr(lam)])
        return buf.getvalue()

    def summary(self, include_wall_time: bool = True) -> dict:
        cfg = asdict(self.config)
        cfg["widths"] = list(self.config.widths)
        return {
            "strategy": self.strategy,
            "config": cfg,
            "final_accuracy": self.final_accuracy,
            "conv": self.conv(),
            "eff": self.eff(),
            "final_size": self.set_size[-1],
            "wall_time": self.wall_time if include_wall_time else None,
        }

    def summary_json(self, include_wall_time: bool = True) -> str:
        return json.dumps(self.summary(include_wall_time), indent=2, sort_keys=True) + "\n"


class _Run:
    """Shared state of one run: seeded streams, net, optimizer."""

    def __init__(self, cfg: RunConfig, oracle: Oracle, test: LabeledDataset, strategy: str):
        if test.d != oracle.d:
            raise ValueError("test data dimension does not match the oracle")
        init_ss, sample_ss, batch_ss = np.random.SeedSequence(cfg.seed).spawn(3)
        self.cfg = cfg
        self.oracle = oracle
        self.test = test
        self.sampler = cfg.make_sampler(oracle.d)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.net = CopyNet.init(oracle.d, oracle.n_classes, cfg.widths, np.random.default_rng(init_ss))
        self.opt = OptimizerState.fresh(self.net, lr=cfg.lr)
        self.record = RunRecord(strategy, cfg)
        self.t0 = time.perf_counter()

    def draw(self, n):
        return draw_labelled(n, self.sampler, self.oracle, self.sample_rng)

    def train(self, sset, lam):
        prev = self.net
        self.net, diag = train_capacity_loop(
            self.net,
            sset,
            self.cfg.schedule(),
            self.cfg.budget(),
            theta_prev=prev if lam > 0 else None,
            lam=lam,
            batch=self.cfg.batch,
            rng_seed=self.batch_rng,
            opt=self.opt,
        )
        return diag

    def accuracy(self):
        return copy_accuracy(self.net.predict(self.test.points), self.test.labels)

    def step(self, sset, lam):
        diag = self.train(sset, lam)
        self.record.log_iteration(self.accuracy(), sset, lam, diag.epochs)
        log.debug(
            "%s t=%d acc=%.4f |S|=%d lam=%.4g epochs=%d",
            self.record.strategy, len(self.record.accuracy) - 1, self.record.accuracy[-1],
            len(sset), lam, diag.epochs,
        )

    def finish(self):
        self.record.net = self.net
        self.record.wall_time = time.perf_counter() - self.t0
        return self.record


def _iterate(cfg: RunConfig, oracle, test, strategy: str, select, lam_rule) -> RunRecord:
    run = _Run(cfg, oracle, test, strategy)
    sset = run.draw(cfg.n).refresh_rho(run.net)
    lam = cfg.lambda0 if lam_rule else 0.0
    run.step(sset, 0.0)
    run.record.lam[-1] = lam
    lam_state = LambdaState(cfg.lambda0, len(sset)) if lam_rule else None
    for _ in range(cfg.T):
        sset = select(run, sset)
        if lam_state is not None:
            if cfg.auto_lambda:
                lam_state = update_lambda(lam_state, len(sset))
            else:
                lam_state = replace(lam_state, prev_size=len(sset))
            lam = lam_state.lam
        run.step(sset, lam)
    return run.finish()


def run_sequential(cfg: RunConfig, oracle: Oracle, test: LabeledDataset) -> RunRecord:
    """Selection step, lambda update and memory-aware training, repeated ``cfg.T`` times.

    Iteration 0 trains from scratch on ``n`` fresh points without the memory
    term. ``lambda0 = 0`` with ``auto_lambda`` off pins the memory term off.
    """

    def select(run, sset):
        return filter_step(sset, cfg.n, cfg.delta, run.sampler, run.oracle, run.net, run.sample_rng, cfg.floor)

    return _iterate(cfg, oracle, test, "sequential", select, lam_rule=cfg.lambda0 > 0)


def run_pure_sequential(cfg: RunConfig, oracle: Oracle, test: LabeledDataset) -> RunRecord:
    """Grow the set by ``n`` fresh points each iteration; no filtering, no memory term."""

    def select(run, sset):
        return sset.append(run.draw(cfg.n)).refresh_rho(run.net)

    return _iterate(cfg, oracle, test, "pure-sequential", select, lam_rule=False)


def run_online(cfg: RunConfig, oracle: Oracle, test: LabeledDataset) -> RunRecord:
    """Keep training one net on ``n`` fresh points per iteration, discarding older ones."""

    def select(run, sset):
        return run.draw(cfg.n).refresh_rho(run.net)

    return _iterate(cfg, oracle, test, "online", select, lam_rule=False)


def run_single_pass(cfg: RunConfig, oracle: Oracle, test: LabeledDataset) -> RunRecord:
    """Draw all ``n * T`` points at once and train a single time."""
    total = cfg.n * cfg.T
    if total <= 0:
        raise ValueError("single-pass needs n * T > 0 synthetic points")
    run = _Run(cfg, oracle, test, "single-pass")
    sset = run.draw(total).refresh_rho(run.net)
    run.step(sset, 0.0)
    return run.finish()


RUNNERS = {
    "sequential": run_sequential,
    "pure-sequential": run_pure_sequential,
    "online": run_online,
    "single-pass": run_single_pass,
}


def run_strategy(cfg: RunConfig, oracle: Oracle, test: LabeledDataset) -> RunRecord:
    return RUNNERS[cfg.strategy](cfg, oracle, test)
