"""Command-line interface: run, sweep, aggregate, plot-data, verify.

Exit codes: 0 success, 1 configuration error, 2 runtime abort,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from .datasets import write_dataset_csv
from .experiment import (
    ExperimentConfig,
    RunMetrics,
    aggregate,
    make_grid,
    read_metrics_csv,
    run_learning,
    run_sweep,
    write_aggregate_csv,
    write_metrics_csv,
    write_trace_csv,
)

log = logging.getLogger("iderr")

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_VERIFY = 0, 1, 2, 3
FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
GRID_KEYS = ("grid", "seeds")


class ConfigError(ValueError):
    pass


def _check_keys(raw: dict, where: str) -> None:
    unknown = sorted(set(raw) - set(FIELDS))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {unknown}; valid keys: {sorted(FIELDS)}")


def _coerce(raw: dict) -> dict:
    # YAML 1.1 reads "1e-9" as a string; accept it for float fields
    out = dict(raw)
    for key, value in raw.items():
        if key in FIELDS and isinstance(FIELDS[key].default, float) and isinstance(value, str):
            try:
                out[key] = float(value)
            except ValueError:
                raise ConfigError(f"{key} must be a number, got {value!r}") from None
    return out


def _build(raw: dict) -> ExperimentConfig:
    raw = _coerce(raw)
    try:
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_overrides(items) -> dict:
    """``key=value`` strings; values parsed as YAML scalars/lists."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def load_config(path=None, overrides: dict | None = None, seed: int | None = None):
    """Parse a YAML config into one ``ExperimentConfig`` or a grid (list).

    Top-level keys are ExperimentConfig fields.  An optional ``grid`` maps
    field names to value lists (Cartesian product) and ``seeds`` is either a
    count or an explicit list.  Unknown keys and out-of-range choices raise
    :class:`ConfigError`.
    """
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    raw = dict(raw)
    grid = raw.pop("grid", None)
    seeds = raw.pop("seeds", None)
    raw.update(overrides or {})
    if seed is not None:
        raw["seed"] = seed
    _check_keys(raw, "config")
    base = _build(raw)
    if grid is None and seeds is None:
        return base
    grid = dict(grid or {})
    _check_keys(grid, "grid")
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"grid axis {key!r} must be a non-empty list")
    if seeds is None:
        seeds = [base.seed]
    elif isinstance(seeds, int):
        seeds = list(range(seeds))
    try:
        return make_grid(base, seeds=seeds, **{k: [_coerce({k: v})[k] for v in vals] for k, vals in grid.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def config_to_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def read_config_yaml(path) -> ExperimentConfig:
    cfg = load_config(path)
    if isinstance(cfg, list):
        raise ConfigError(f"{path} describes a grid, expected a single run")
    return cfg


def ensure_writable(out_dir) -> Path:
    """Create ``out_dir`` and prove it is writable before any work starts."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    return out


# plot data


def _group_name(key) -> str:
    return "_".join(str(k) for k in key)


def emit_plot_data(aggs: dict, out_dir) -> list[Path]:
    """One CSV per group: iteration, then mean and mean+std of position
    error and feedback magnitude."""
    if not aggs:
        raise ValueError("no aggregates to emit")
    out = ensure_writable(out_dir)
    paths = []
    for key in sorted(aggs):
        agg = aggs[key]
        path = out / f"curve_{_group_name(key)}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "pos_err_mean", "pos_err_mean_plus_std", "fb_mag_mean", "fb_mag_mean_plus_std"])
            for i, it in enumerate(agg.iterations):
                pm, ps = agg.mean["pos_err_mean"][i], agg.std["pos_err_mean"][i]
                fm, fs = agg.mean["fb_mag_mean"][i], agg.std["fb_mag_mean"][i]
                w.writerow([int(it), repr(float(pm)), repr(float(pm + ps)), repr(float(fm)), repr(float(fm + fs))])
        paths.append(path)
    return paths


def load_runs(runs_dir) -> list[RunMetrics]:
    """Read every ``*/config.yaml`` + ``metrics.csv`` pair under ``runs_dir``."""
    runs = []
    for cfg_path in sorted(Path(runs_dir).glob("**/config.yaml")):
        metrics = cfg_path.parent / "metrics.csv"
        if not metrics.exists():
            continue
        cfg = read_config_yaml(cfg_path)
        run = read_metrics_csv(metrics, cfg)
        err = cfg_path.parent / "error.txt"
        if err.exists():
            run.error = err.read_text().strip()
        runs.append(run)
    if not runs:
        raise ConfigError(f"no runs found under {runs_dir}")
    return runs


def _save_run(run: RunMetrics, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(config_to_yaml(run.config))
    write_metrics_csv(run, run_dir / "metrics.csv")
    if run.error:
        (run_dir / "error.txt").write_text(run.error + "\n")


# verbs


def cmd_run(args) -> int:
    cfg = load_config(args.config, parse_overrides(args.set), args.seed)
    if isinstance(cfg, list):
        raise ConfigError("config describes a grid; use the sweep verb")
    out = ensure_writable(args.out)
    print(config_to_yaml(cfg), end="")
    (out / "config.yaml").write_text(config_to_yaml(cfg))

    def dump(k, trace, record, data):
        log.info("iteration %d: pos_err=%.4g fb=%.4g steps=%d%s", k, record.pos_err_mean, record.fb_mag_mean,
                 record.steps, " ABORTED" if record.aborted else "")
        if args.save_traces:
            (out / "traces").mkdir(exist_ok=True)
            write_trace_csv(trace, out / "traces" / f"trace_{k:03d}.csv")
            write_dataset_csv(data, out / "traces" / f"dataset_{k:03d}.csv")

    result = run_learning(cfg, train_last=True, on_episode=dump)
    write_metrics_csv(result.metrics, out / "metrics.csv")
    result.model.save(out / "model.npz")
    return EXIT_ABORT if result.metrics.aborted else EXIT_OK


def cmd_sweep(args) -> int:
    grid = load_config(args.config, parse_overrides(args.set), args.seed)
    if not isinstance(grid, list):
        grid = [grid]
    out = ensure_writable(args.out)
    (out / "grid.yaml").write_text(yaml.safe_dump([c.to_dict() for c in grid], sort_keys=False))
    print(f"sweep: {len(grid)} runs -> {out}")

    def progress(i, n, run):
        log.info("[%d/%d] %s", i, n, "error" if run.error else "ok")

    runs = run_sweep(grid, n_jobs=args.jobs, progress=progress)
    width = len(str(len(runs) - 1))
    for i, run in enumerate(runs):
        _save_run(run, out / "runs" / f"{i:0{width}d}")
    group_by = tuple(args.group_by.split(","))
    try:
        write_aggregate_csv(aggregate(runs, group_by), out / "aggregate.csv")
    except ValueError as exc:
        log.error("aggregation failed: %s", exc)
        return EXIT_ABORT
    failed = sum(r.error is not None for r in runs)
    aborted = sum(r.aborted for r in runs)
    print(f"done: {len(runs)} runs, {aborted} with aborted episodes, {failed} failed")
    return EXIT_ABORT if failed else EXIT_OK


def cmd_aggregate(args) -> int:
    out = ensure_writable(args.out)
    runs = load_runs(args.runs)
    group_by = tuple(args.group_by.split(","))
    bad = [g for g in group_by if g not in FIELDS]
    if bad:
        raise ConfigError(f"unknown group_by field(s) {bad}")
    path = write_aggregate_csv(aggregate(runs, group_by), out / "aggregate.csv")
    print(path)
    return EXIT_OK


def cmd_plot_data(args) -> int:
    out = ensure_writable(args.out)
    runs = load_runs(args.runs)
    group_by = tuple(args.group_by.split(","))
    for path in emit_plot_data(aggregate(runs, group_by), out):
        print(path)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .checks import run_checks

    cfg = load_config(args.config, parse_overrides(args.set), args.seed)
    if isinstance(cfg, list):
        raise ConfigError("verify takes a single config, not a grid")
    out = ensure_writable(args.out) if args.out else None
    report = run_checks(cfg, quick=args.quick)
    text = json.dumps(report, indent=2)
    print(text)
    if out is not None:
        (out / "verify.json").write_text(text + "\n")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iderr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, out_required=True):
        sp.add_argument("config", nargs="?", help="YAML config (defaults when omitted)")
        sp.add_argument("-o", "--out", required=out_required, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int, help="override the repetition seed")

    sp = sub.add_parser("run", help="one learning run (n_iterations episodes)")
    common(sp)
    sp.add_argument("--save-traces", action="store_true", help="write per-iteration trace and dataset CSVs")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="run every cell of a grid config")
    common(sp)
    sp.add_argument("-j", "--jobs", type=int, default=1)
    sp.add_argument("--group-by", default="controller,gain_setting,data_source")
    sp.set_defaults(func=cmd_sweep)

    for verb, func, helptext in (("aggregate", cmd_aggregate, "aggregate run directories into one CSV"),
                                 ("plot-data", cmd_plot_data, "per-group learning-curve CSVs")):
        sp = sub.add_parser(verb, help=helptext)
        sp.add_argument("runs", help="directory containing run subdirectories")
        sp.add_argument("-o", "--out", required=True)
        sp.add_argument("--group-by", default="controller,gain_setting,data_source")
        sp.set_defaults(func=func)

    sp = sub.add_parser("verify", help="run the invariant and oracle checks")
    common(sp, out_required=False)
    sp.add_argument("--quick", action="store_true", help="skip the multi-iteration oracle")
    sp.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything escaping a verb is a runtime abort
        log.debug("abort", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
