"""Experiment orchestration: config files, seeded run grids, result files, reports.

An experiment runs every strategy for every delta value ``repetitions``
times on one dataset/oracle pair. Each run gets a seed derived from
``(master_seed, strategy, delta, repetition)``. Output layout::

    OUT/config.json               resolved configuration
    OUT/runs/<run id>.csv         per-iteration accuracy, mean rho, set size, lambda
    OUT/runs/<run id>.json        per-run summary
    OUT/results.csv               one row per successful run
    OUT/report.json               aggregate statistics per (strategy, delta)
    OUT/operational_points.json   best accuracy / efficiency / convergence runs
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .datagen import TOY_GENERATORS, LabeledDataset, load_csv, split_stratified, standardize
from .engine import STRATEGIES, RunConfig, RunRecord, run_strategy
from .metrics import MetricSummary, select_operational_points
from .oracle import AnalyticOracle, GridOracle, Oracle, make_nn_oracle

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUT_ENV = "SEQCOPY_OUT"
RESULT_COLUMNS = ["dataset", "strategy", "delta", "lambda0", "seed", "accuracy", "conv", "eff", "final_size"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending field."""


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "results"))


# -- configuration --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "spirals"
    n: int = 2000
    noise: float = 0.0
    seed: int = 0
    turns: float = 1.0
    path: str | None = None
    test_fraction: float = 0.2
    standardize: bool = True
    name: str | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return Path(self.path).stem if self.kind == "csv" else self.kind


@dataclass(frozen=True)
class OracleConfig:
    kind: str = "nn"
    path: str | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    master_seed: int = 0
    repetitions: int = 1
    strategies: tuple[str, ...] = ("sequential",)
    deltas: tuple[float, ...] = (1e-6,)
    reproducible: bool = True
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["strategies"] = list(self.strategies)
        out["deltas"] = list(self.deltas)
        out["run"]["widths"] = list(self.run.widths)
        for key in ("seed", "strategy", "delta"):
            out["run"].pop(key)
        return out


_RUN_KEYS = {f.name for f in fields(RunConfig)} - {"seed", "strategy", "delta"}


def _check_keys(section: dict, allowed, where: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{where}{key}'")


def _typed(section: dict, cls, where: str) -> dict:
    """Coerce ints to floats where the field is a float; reject other type mismatches."""
    out = {}
    types = {f.name: f.type for f in fields(cls)}
    for key, value in section.items():
        expected = str(types[key])
        if "float" in expected and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif expected == "int" and not (isinstance(value, int) and not isinstance(value, bool)):
            raise ConfigError(f"field '{where}{key}' must be an integer, got {value!r}")
        elif expected == "bool" and not isinstance(value, bool):
            raise ConfigError(f"field '{where}{key}' must be true or false, got {value!r}")
        elif expected == "str" and not isinstance(value, str):
            raise ConfigError(f"field '{where}{key}' must be a string, got {value!r}")
        out[key] = value
    return out


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed config document. Relative paths resolve against ``base_dir``."""
    raw = dict(raw)
    _check_keys(raw, {"experiment", "dataset", "oracle", "run"}, "")
    exp = dict(raw.get("experiment", {}))
    _check_keys(exp, {"name", "master_seed", "repetitions", "strategies", "deltas", "reproducible", "workers"}, "experiment.")
    ds = dict(raw.get("dataset", {}))
    _check_keys(ds, {f.name for f in fields(DatasetConfig)}, "dataset.")
    orc = dict(raw.get("oracle", {}))
    _check_keys(orc, {f.name for f in fields(OracleConfig)}, "oracle.")
    run = dict(raw.get("run", {}))
    _check_keys(run, _RUN_KEYS, "run.")

    if base_dir is not None:
        for section in (ds, orc):
            if section.get("path") is not None and not Path(section["path"]).is_absolute():
                section["path"] = str(Path(base_dir) / section["path"])

    dataset = DatasetConfig(**_typed(ds, DatasetConfig, "dataset."))
    if dataset.kind not in (*TOY_GENERATORS, "csv"):
        raise ConfigError(f"field 'dataset.kind' must be one of {sorted((*TOY_GENERATORS, 'csv'))}")
    if dataset.kind == "csv" and not dataset.path:
        raise ConfigError("field 'dataset.path' is required when dataset.kind = 'csv'")
    if not 0 < dataset.test_fraction < 1:
        raise ConfigError("field 'dataset.test_fraction' must lie in (0, 1)")
    if dataset.kind != "csv" and dataset.n < 4:
        raise ConfigError("field 'dataset.n' must be >= 4")

    oracle = OracleConfig(**_typed(orc, OracleConfig, "oracle."))
    if oracle.kind not in ("nn", "analytic", "grid"):
        raise ConfigError("field 'oracle.kind' must be one of ['analytic', 'grid', 'nn']")
    if oracle.kind == "analytic" and dataset.kind not in TOY_GENERATORS:
        raise ConfigError("field 'oracle.kind' = 'analytic' needs a toy dataset")
    if oracle.kind == "grid" and not oracle.path:
        raise ConfigError("field 'oracle.path' is required when oracle.kind = 'grid'")

    if "widths" in run:
        run["widths"] = tuple(run["widths"])
    try:
        run_cfg = RunConfig(**_typed(run, RunConfig, "run.")) if run else RunConfig()
    except ValueError as exc:
        raise ConfigError(f"field 'run': {exc}") from None

    strategies = tuple(exp.pop("strategies", ("sequential",)))
    for s in strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"field 'experiment.strategies' has unknown strategy {s!r}; choose from {STRATEGIES}")
    if not strategies or len(set(strategies)) != len(strategies):
        raise ConfigError("field 'experiment.strategies' must be a non-empty list without duplicates")
    deltas = tuple(float(d) for d in exp.pop("deltas", (1e-6,)))
    if not deltas or any(d < 0 or not math.isfinite(d) for d in deltas) or len(set(deltas)) != len(deltas):
        raise ConfigError("field 'experiment.deltas' must be distinct finite values >= 0")
    exp = _typed(exp, ExperimentConfig, "experiment.")
    cfg = ExperimentConfig(strategies=strategies, deltas=deltas, dataset=dataset, oracle=oracle, run=run_cfg, **exp)
    if cfg.repetitions < 1:
        raise ConfigError("field 'experiment.repetitions' must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("field 'experiment.workers' must be >= 1")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, base_dir=path.parent)


# -- problem construction ---------------------------------------------------------


def build_problem(cfg: ExperimentConfig) -> tuple[Oracle, LabeledDataset]:
    """Dataset -> (standardization) -> stratified split -> oracle and held-out test set."""
    ds = cfg.dataset
    if ds.kind == "csv":
        data = load_csv(ds.path)
    elif ds.kind == "spirals":
        data = TOY_GENERATORS[ds.kind](ds.n, ds.noise, ds.seed, turns=ds.turns)
    else:
        data = TOY_GENERATORS[ds.kind](ds.n, ds.noise, ds.seed)
    params = None
    if ds.standardize:
        data, params = standardize(data)
    train, test = split_stratified(data, ds.test_fraction, ds.seed)
    if cfg.oracle.kind == "nn":
        oracle = make_nn_oracle(train)
    elif cfg.oracle.kind == "analytic":
        oracle = AnalyticOracle(ds.kind, params)
    else:
        oracle = GridOracle.from_csv(cfg.oracle.path)
    if oracle.d != test.d:
        raise ConfigError(f"oracle input dimension {oracle.d} does not match dataset dimension {test.d}")
    return oracle, test


# -- seeds and run grid -------------------------------------------------------------


def derive_seed(master_seed: int, strategy: str, delta: float, repetition: int) -> int:
    """Deterministic 63-bit seed from the run coordinates."""
    key = f"{int(master_seed)}|{strategy}|{float(delta)!r}|{int(repetition)}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def _fmt_delta(delta: float) -> str:
    return f"{delta:.0e}" if delta else "0"


def run_id(strategy: str, delta: float, repetition: int) -> str:
    return f"{strategy}_d{_fmt_delta(delta)}_r{repetition:03d}"


@dataclass(frozen=True)
class RunTask:
    run_id: str
    strategy: str
    delta: float
    repetition: int
    config: RunConfig


def plan_runs(cfg: ExperimentConfig) -> list[RunTask]:
    """Every (strategy, delta, repetition) cell. Delta only affects the sequential strategy,
    so the baselines run once per repetition and are labelled with delta = 0."""
    tasks = []
    for strategy in cfg.strategies:
        deltas = cfg.deltas if strategy == "sequential" else (0.0,)
        for delta in deltas:
            for rep in range(cfg.repetitions):
                seed = derive_seed(cfg.master_seed, strategy, delta, rep)
                run_cfg = replace(cfg.run, strategy=strategy, delta=delta, seed=seed)
                tasks.append(RunTask(run_id(strategy, delta, rep), strategy, delta, rep, run_cfg))
    seeds = [t.config.seed for t in tasks]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("derived seed collision")
    return tasks


# -- file output --------------------------------------------------------------------


def atomic_write(path, text: str) -> None:
    """Write to a temp file in the destination directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- execution ----------------------------------------------------------------------


@dataclass
class RunOutcome:
    task: RunTask
    record: RunRecord | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.record is not None


def _execute(task: RunTask, oracle: Oracle, test: LabeledDataset) -> RunOutcome:
    try:
        return RunOutcome(task, run_strategy(task.config, oracle, test))
    except Exception as exc:  # a failed repetition must not abort the sweep
        return RunOutcome(task, error=f"{type(exc).__name__}: {exc}")


def _result_row(dataset: str, outcome: RunOutcome) -> dict:
    rec, task = outcome.record, outcome.task
    return {
        "dataset": dataset,
        "strategy": task.strategy,
        "delta": task.delta,
        "lambda0": task.config.lambda0 if task.strategy == "sequential" else 0.0,
        "seed": task.config.seed,
        "accuracy": rec.final_accuracy,
        "conv": rec.conv(),
        "eff": rec.eff(),
        "final_size": rec.set_size[-1],
    }


def _stats(values) -> dict:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(np.mean(arr)), "std": float(np.std(arr)), "n": len(vals)}


@dataclass
class AggregateReport:
    dataset: str
    groups: list[dict]
    rows: list[dict]
    failures: list[dict]
    operational_points: dict

    @property
    def n_success(self) -> int:
        return len(self.rows)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "n_success": self.n_success,
            "n_failed": len(self.failures),
            "groups": self.groups,
            "failures": self.failures,
        }

    def group(self, strategy: str, delta: float = 0.0) -> dict:
        for g in self.groups:
            if g["strategy"] == strategy and g["delta"] == delta:
                return g
        raise KeyError((strategy, delta))


def aggregate(dataset: str, outcomes: list[RunOutcome]) -> AggregateReport:
    rows = [_result_row(dataset, o) for o in outcomes if o.ok]
    failures = [{"run_id": o.task.run_id, "error": o.error} for o in outcomes if not o.ok]
    keys = []
    for o in outcomes:
        k = (o.task.strategy, o.task.delta)
        if k not in keys:
            keys.append(k)
    groups = []
    for strategy, delta in keys:
        members = [r for r in rows if r["strategy"] == strategy and r["delta"] == delta]
        n_failed = sum(1 for o in outcomes if not o.ok and (o.task.strategy, o.task.delta) == (strategy, delta))
        groups.append(
            {
                "strategy": strategy,
                "delta": delta,
                "n_success": len(members),
                "n_failed": n_failed,
                **{m: _stats([r[m] for r in members]) for m in ("accuracy", "conv", "eff", "final_size")},
            }
        )
    return AggregateReport(dataset, groups, rows, failures, _operational(outcomes))


def _operational(outcomes: list[RunOutcome]) -> dict:
    single = [o.record.final_accuracy for o in outcomes if o.ok and o.task.strategy == "single-pass"]
    seq = [o for o in outcomes if o.ok and o.task.strategy == "sequential" and o.record.conv() is not None]
    if not single:
        return {"status": "no single-pass reference run"}
    if not seq:
        return {"status": "no sequential runs"}
    ref = float(np.mean(single))
    summaries = [
        MetricSummary(
            accuracy=o.record.final_accuracy,
            conv=o.record.conv(),
            eff=o.record.eff(),
            seed=o.task.config.seed,
            delta=o.task.delta,
            lambda0=o.task.config.lambda0,
            label=o.task.run_id,
        )
        for o in seq
    ]
    out = select_operational_points(summaries, ref).to_dict()
    out["single_pass_accuracy"] = ref
    return out


def _results_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, RESULT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in RESULT_COLUMNS})
    return buf.getvalue()


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int | None = None) -> AggregateReport:
    """Run the full grid and write all result files under ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else default_out_dir()
    workers = cfg.workers if workers is None else workers
    if workers < 1:
        raise ConfigError("field 'workers' must be >= 1")
    if cfg.reproducible and workers > 1:
        log.info("reproducible mode: running repetitions serially")
        workers = 1
    oracle, test = build_problem(cfg)
    tasks = plan_runs(cfg)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", _json(cfg.to_dict()))

    if workers == 1:
        outcomes = [_execute(t, oracle, test) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_execute, tasks, [oracle] * len(tasks), [test] * len(tasks)))

    for o in outcomes:
        if o.ok:
            atomic_write(out / "runs" / f"{o.task.run_id}.csv", o.record.to_csv())
            summary = o.record.summary(include_wall_time=not cfg.reproducible)
            summary["run_id"] = o.task.run_id
            atomic_write(out / "runs" / f"{o.task.run_id}.json", _json(summary))
        else:
            log.warning("run %s failed: %s", o.task.run_id, o.error)
    failed = [o for o in outcomes if not o.ok]
    if failed:
        warnings.warn(f"{len(failed)} of {len(outcomes)} runs failed; aggregating over the successes", RuntimeWarning)

    report = aggregate(cfg.dataset.label, outcomes)
    atomic_write(out / "results.csv", _results_csv(report.rows))
    atomic_write(out / "report.json", _json(report.to_dict()))
    atomic_write(out / "operational_points.json", _json(report.operational_points))
    return report


# -- reporting ----------------------------------------------------------------------


class ReportError(RuntimeError):
    pass


def _read_run_csv(path: Path) -> dict:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or set(rows[0]) != {"iter", "accuracy", "mean_rho", "set_size", "lambda"}:
            raise ValueError("unexpected columns")
        return {
            "accuracy": [float(r["accuracy"]) for r in rows],
            "mean_rho": [float(r["mean_rho"]) for r in rows],
            "set_size": [float(r["set_size"]) for r in rows],
        }
    except (OSError, ValueError, KeyError) as exc:
        raise ReportError(f"cannot read run file {path}: {exc}") from None


def load_runs(in_dir) -> dict[str, list[dict]]:
    """Per-run curves grouped by ``strategy`` (or ``strategy@delta`` for sequential runs)."""
    in_dir = Path(in_dir)
    run_dir = in_dir / "runs"
    if not in_dir.is_dir():
        raise ReportError(f"results directory not found: {in_dir}")
    paths = sorted(run_dir.glob("*.json")) if run_dir.is_dir() else []
    if not paths:
        raise ReportError(f"no run files in {run_dir}")
    groups: dict[str, list[dict]] = {}
    for p in paths:
        try:
            meta = json.loads(p.read_text())
            strategy, delta = meta["strategy"], meta["config"]["delta"]
        except (OSError, ValueError, KeyError) as exc:
            raise ReportError(f"cannot read run summary {p}: {exc}") from None
        label = f"{strategy}@{_fmt_delta(delta)}" if strategy == "sequential" else strategy
        groups.setdefault(label, []).append(_read_run_csv(p.with_suffix(".csv")))
    return groups


def _mean_std_columns(curves: list[list[float]], length: int):
    means, stds = [], []
    for t in range(length):
        vals = [c[t] for c in curves if t < len(c)]
        means.append(float(np.mean(vals)) if vals else None)
        stds.append(float(np.std(vals)) if vals else None)
    return means, stds


def plot_data(groups: dict[str, list[dict]], metric: str) -> str:
    """CSV with ``iter`` then ``<group>_mean, <group>_std`` columns per group."""
    labels = sorted(groups)
    length = max(len(run[metric]) for runs in groups.values() for run in runs)
    cols = {}
    for label in labels:
        cols[label] = _mean_std_columns([run[metric] for run in groups[label]], length)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter"] + [f"{lab}_{s}" for lab in labels for s in ("mean", "std")])
    for t in range(length):
        row = [t]
        for lab in labels:
            m, s = cols[lab][0][t], cols[lab][1][t]
            row += ["" if m is None else repr(m), "" if s is None else repr(s)]
        w.writerow(row)
    return buf.getvalue()


def _read_results(in_dir: Path) -> list[dict]:
    path = in_dir / "results.csv"
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    if rows and set(rows[0]) != set(RESULT_COLUMNS):
        raise ReportError(f"cannot read {path}: unexpected columns")
    return rows


def summary_table(in_dir) -> list[dict]:
    """Mean and std of accuracy / conv / eff per (dataset, strategy, delta), recomputed from results.csv."""
    path = Path(in_dir) / "results.csv"
    rows = _read_results(Path(in_dir))
    try:
        return _summarize(rows)
    except ValueError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None


def _summarize(rows: list[dict]) -> list[dict]:
    keys = []
    for r in rows:
        k = (r["dataset"], r["strategy"], float(r["delta"]))
        if k not in keys:
            keys.append(k)
    out = []
    for dataset, strategy, delta in keys:
        members = [r for r in rows if (r["dataset"], r["strategy"], float(r["delta"])) == (dataset, strategy, delta)]
        entry = {"dataset": dataset, "strategy": strategy, "delta": delta, "runs": len(members)}
        for m in ("accuracy", "conv", "eff"):
            st = _stats([float(r[m]) if r[m] != "" else None for r in members])
            entry[f"{m}_mean"], entry[f"{m}_std"] = st["mean"], st["std"]
        out.append(entry)
    return out


def _pm(mean, std) -> str:
    return "n/a" if mean is None else f"{mean:.3f} ± {std:.3f}"


def render_table(entries: list[dict]) -> str:
    header = ["dataset", "strategy", "delta", "runs", "A_C", "conv", "eff"]
    body = [
        [e["dataset"], e["strategy"], _fmt_delta(e["delta"]), str(e["runs"]),
         _pm(e["accuracy_mean"], e["accuracy_std"]), _pm(e["conv_mean"], e["conv_std"]), _pm(e["eff_mean"], e["eff_std"])]
        for e in entries
    ]
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(entries: list[dict]) -> str:
    buf = io.StringIO()
    cols = ["dataset", "strategy", "delta", "runs", "accuracy_mean", "accuracy_std", "conv_mean", "conv_std", "eff_mean", "eff_std"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for e in entries:
        w.writerow({k: "" if e[k] is None else e[k] for k in cols})
    return buf.getvalue()


def report(in_dir, fmt: str = "table") -> str:
    """Write plot-data CSVs and a summary table into ``in_dir``; return the rendered table."""
    if fmt not in ("table", "csv"):
        raise ValueError("format must be 'table' or 'csv'")
    in_dir = Path(in_dir)
    groups = load_runs(in_dir)
    for metric in ("accuracy", "mean_rho", "set_size"):
        atomic_write(in_dir / f"plot_{metric}.csv", plot_data(groups, metric))
    entries = summary_table(in_dir)
    text = render_table(entries) if fmt == "table" else render_csv(entries)
    atomic_write(in_dir / ("table.txt" if fmt == "table" else "table.csv"), text)
    return text
