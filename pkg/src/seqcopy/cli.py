"""Command-line entry point: ``seqcopy run | sweep | report``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import harness
from .engine import RunConfig

log = logging.getLogger("seqcopy")

_SWEEPABLE = sorted({f.name for f in fields(RunConfig)} - {"seed", "strategy", "widths", "sampler"})


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seqcopy", description="Copy a black-box classifier with sequential training.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config")
    run.add_argument("--config", required=True, type=Path)
    run.add_argument("--seed", type=int, help="override experiment.master_seed")
    run.add_argument("--workers", type=int, help="parallel repetitions (ignored in reproducible mode)")
    run.add_argument("--out", type=Path, help=f"output directory (default: ${harness.OUT_ENV} or ./results)")

    sweep = sub.add_parser("sweep", help="run a config over several values of one parameter")
    sweep.add_argument("--config", required=True, type=Path)
    sweep.add_argument("--param", required=True, help=f"'delta' or a run field: {', '.join(_SWEEPABLE)}")
    sweep.add_argument("--values", required=True, nargs="+")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--workers", type=int)
    sweep.add_argument("--out", type=Path)

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("--in", dest="in_dir", required=True, type=Path)
    rep.add_argument("--format", choices=("table", "csv"), default="table")
    return p


def _parse_value(name: str, text: str):
    kind = {f.name: str(f.type) for f in fields(RunConfig)}[name]
    try:
        if kind == "bool":
            if text.lower() not in ("true", "false"):
                raise ValueError
            return text.lower() == "true"
        if kind == "int":
            return int(text)
        return float(text)
    except ValueError:
        raise harness.ConfigError(f"field '{name}': cannot parse value {text!r}") from None


def _with_overrides(cfg, seed):
    return cfg if seed is None else replace(cfg, master_seed=seed)


def _cmd_run(args) -> int:
    cfg = _with_overrides(harness.load_config(args.config), args.seed)
    out = args.out or harness.default_out_dir()
    rep = harness.run_experiment(cfg, out, workers=args.workers)
    print(f"{rep.n_success} runs succeeded, {len(rep.failures)} failed; results in {out}")
    return 0 if rep.n_success else 1


def _cmd_sweep(args) -> int:
    cfg = _with_overrides(harness.load_config(args.config), args.seed)
    out = args.out or harness.default_out_dir()
    if args.param == "delta":
        deltas = tuple(_parse_value("delta", v) for v in args.values)
        cfg = harness.config_from_dict({**_as_raw(cfg), "experiment": {**_as_raw(cfg)["experiment"], "deltas": list(deltas)}})
        rep = harness.run_experiment(cfg, out, workers=args.workers)
        print(f"{rep.n_success} runs succeeded, {len(rep.failures)} failed; results in {out}")
        return 0 if rep.n_success else 1
    if args.param not in _SWEEPABLE:
        raise harness.ConfigError(f"field '{args.param}' cannot be swept; choose delta or one of {_SWEEPABLE}")
    ok = 0
    for text in args.values:
        value = _parse_value(args.param, text)
        raw = _as_raw(cfg)
        raw["run"][args.param] = value
        sub = harness.config_from_dict(raw)
        target = out / f"{args.param}={text}"
        rep = harness.run_experiment(sub, target, workers=args.workers)
        print(f"{args.param}={text}: {rep.n_success} runs succeeded, {len(rep.failures)} failed; results in {target}")
        ok += rep.n_success
    return 0 if ok else 1


def _as_raw(cfg) -> dict:
    """Config back to the nested key-value form accepted by ``config_from_dict``."""
    d = cfg.to_dict()
    exp = {k: d.pop(k) for k in ("name", "master_seed", "repetitions", "strategies", "deltas", "reproducible", "workers")}
    ds = {k: v for k, v in d["dataset"].items() if v is not None}
    orc = {k: v for k, v in d["oracle"].items() if v is not None}
    return {"experiment": exp, "dataset": ds, "oracle": orc, "run": d["run"]}


def _cmd_report(args) -> int:
    text = harness.report(args.in_dir, args.format)
    sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except (harness.ConfigError, harness.ReportError, ValueError, OSError) as exc:
        print(f"seqcopy: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, harness.ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
