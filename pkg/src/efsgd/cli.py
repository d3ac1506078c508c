"""``efsgd`` command line: run, sweep, verify, report.

Exit codes: 0 success, 1 runtime failure (divergence, failed invariant),
2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, apply_overrides, from_dict, load_raw, set_dotted
from .harness import (
    METRIC_COLUMNS,
    DivergenceError,
    RunResult,
    expected_grad_norm,
    metrics_csv,
    read_metrics_csv,
    run_experiment,
    write_run,
)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
OUTPUT_ROOT_ENV = "EFSGD_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _execute(raw: dict, out_dir: Path) -> dict:
    """Run one config dict into ``out_dir``; returns a status record (never raises on run failure)."""
    config = from_dict(raw)
    try:
        result = run_experiment(config)
    except DivergenceError as exc:
        partial = RunResult(metrics=exc.metrics, x_final=None, report=None, final={}, trace=None)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metrics.csv").write_text(metrics_csv(partial.metrics))
        summary = {"config": config.to_dict(), "error": str(exc), "diverged_at": exc.t}
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        return {"status": "diverged", "error": str(exc), "dir": str(out_dir)}
    write_run(out_dir, config, result)
    status = "ok" if result.report.passed else "invariant_failed"
    return {"status": status, "dir": str(out_dir), "final": result.final,
            "failed_checks": [k for k, v in result.report.flags.items() if not v]}


def cmd_run(config_path: str, overrides: Sequence[str] = (), out: Optional[str] = None) -> int:
    try:
        raw = apply_overrides(load_raw(config_path), list(overrides))
        from_dict(raw)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(out) if out else output_root() / Path(config_path).stem
    record = _execute(raw, out_dir)
    if record["status"] != "ok":
        print(f"run failed ({record['status']}): {record.get('error') or record.get('failed_checks')}",
              file=sys.stderr)
        return EXIT_FAILURE
    final = record["final"]
    print(f"wrote {out_dir}: final loss {final['loss']:.6g}, ||grad||^2 {final['grad_norm_sq']:.6g}")
    return EXIT_OK


def expand_grid(sweep: dict) -> list[tuple[int, int, dict, dict]]:
    """(cell index, repetition, grid assignment, run config dict) for every run of a sweep.

    Repetition r uses seed base_seed + r in every cell, for the run and its
    data, so cells are paired.
    """
    if not isinstance(sweep, dict) or "base" not in sweep:
        raise UsageError("sweep config needs a 'base' run config and a 'grid'")
    grid = sweep.get("grid") or {}
    if not grid or any(not isinstance(v, list) or len(v) == 0 for v in grid.values()):
        raise UsageError("sweep grid is empty")
    reps = int(sweep.get("repetitions", 1))
    if reps < 1:
        raise UsageError("repetitions must be >= 1")
    base = sweep["base"]
    base_seed = int(base.get("seed", 0))
    problem_seed = base.get("problem", {}).get("seed", base_seed)
    keys = list(grid)
    runs = []
    for cell, values in enumerate(itertools.product(*(grid[k] for k in keys))):
        assignment = dict(zip(keys, values))
        for rep in range(reps):
            raw = copy.deepcopy(base)
            for k, v in assignment.items():
                set_dotted(raw, k, copy.deepcopy(v))
            raw["seed"] = base_seed + rep
            set_dotted(raw, "problem.seed", problem_seed + rep)
            runs.append((cell, rep, assignment, raw))
    return runs


def _sweep_cell(args):
    raw, out_dir = args
    try:
        return _execute(raw, Path(out_dir))
    except ConfigError as exc:
        return {"status": "config_error", "error": str(exc), "dir": out_dir}


def cmd_sweep(config_path: str, out: Optional[str] = None, jobs: int = 1) -> int:
    try:
        sweep = load_raw(config_path)
        runs = expand_grid(sweep)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_root = Path(out) if out else output_root() / Path(config_path).stem
    tasks = [(raw, str(out_root / f"cell{cell:03d}_rep{rep:02d}")) for cell, rep, _, raw in runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_sweep_cell, tasks))
    else:
        records = [_sweep_cell(t) for t in tasks]
    index = []
    for (cell, rep, assignment, raw), record in zip(runs, records):
        index.append({"cell": cell, "repetition": rep, "params": assignment, "seed": raw["seed"], **record})
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "index.json").write_text(json.dumps({"runs": index}, indent=2, sort_keys=True, default=str) + "\n")
    failed = [r for r in index if r["status"] != "ok"]
    print(f"sweep: {len(index) - len(failed)}/{len(index)} runs ok; index at {out_root / 'index.json'}")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_verify(fault_inject: float = 0.0) -> int:
    from .verify import format_table, run_suite

    results = run_suite(fault_inject=fault_inject)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _run_dirs(paths: Sequence[str]) -> tuple[list[Path], list[str]]:
    found, problems = [], []
    for p in map(Path, paths):
        if (p / "metrics.csv").is_file():
            found.append(p)
            continue
        children = sorted(c for c in p.iterdir() if (c / "metrics.csv").is_file()) if p.is_dir() else []
        if children:
            found.extend(children)
        else:
            problems.append(f"{p}: no run found")
    return found, problems


def cmd_report(paths: Sequence[str], out: Optional[str] = None) -> int:
    dirs, problems = _run_dirs(paths)
    rows, lines = [], []
    for d in dirs:
        try:
            metrics = read_metrics_csv(d / "metrics.csv")
            summary = json.loads((d / "summary.json").read_text())
            final = summary["final"]
        except (OSError, ValueError, KeyError) as exc:
            problems.append(f"{d}: {exc}")
            continue
        run_id = str(d)
        for m in metrics:
            rows.append([run_id, m.t, repr(m.loss), repr(m.grad_norm_sq), repr(m.error_norm_sq), repr(m.stepsize),
                         m.bits_ideal, m.bits_wire])
        cfg = summary["config"]
        e_grad = expected_grad_norm(metrics, final["L"])
        bits = sum(m.bits_ideal for m in metrics)
        lines.append(
            f"{run_id}: {cfg['optimizer']}/{cfg['compressor']['kind']} M={cfg['workers']} T={len(metrics)} "
            f"final loss {final['loss']:.6g} E||grad F(x_o)||^2 "
            f"{'n/a' if e_grad is None else format(e_grad, '.6g')} total bits {bits}"
        )
    for p in problems:
        print(f"skipped {p}", file=sys.stderr)
    if not lines:
        print("report: no usable run directories", file=sys.stderr)
        return EXIT_FAILURE
    out_dir = Path(out) if out else Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", *METRIC_COLUMNS])
        w.writerows(rows)
    text = "\n".join(lines) + "\n"
    (out_dir / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efsgd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("sweep", help="run a grid of experiments")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--fault-inject", nargs="?", type=float, const=1e-3, default=0.0,
                   help="perturb worker errors by this amount (default 1e-3) to test the tester")

    p = sub.add_parser("report", help="merge run directories into comparison tables")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command == "run":
        return cmd_run(args.config, args.overrides, args.out)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.out, args.jobs)
    if args.command == "verify":
        return cmd_verify(args.fault_inject)
    return cmd_report(args.dirs, args.out)


if __name__ == "__main__":
    sys.exit(main())
