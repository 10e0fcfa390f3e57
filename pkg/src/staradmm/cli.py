"""Command-line front end: solve one instance, sweep worker counts, and
turn run directories into plot-ready CSV files.

Config files are flat `key = value` text (one key per RunConfig field,
`#` comments allowed); command-line flags override file values. The
ADMM_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .driver import RunConfig, bench, solve
from .errors import ContractViolation, RunAborted, TransportFailure
from .metrics import RunReport, derive_comm_queue, read_ledger_csv, responsiveness_histogram

log = logging.getLogger("staradmm")

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def render_config(config: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"config line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
        kind = _FIELD_TYPES[key]
        if kind in ("int", int):
            values[key] = int(val)
        elif kind in ("float", float):
            values[key] = float(val)
        else:
            values[key] = val
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def _apply_overrides(config: RunConfig, args) -> RunConfig:
    updates = {}
    if args.workers is not None:
        updates["workers"] = args.workers
    if args.workers_per_master is not None:
        updates["workers_per_master"] = args.workers_per_master
    if args.backend is not None:
        updates["backend"] = args.backend
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.min_inner is not None:
        updates["min_inner"] = args.min_inner
    return dataclasses.replace(config, **updates)


def _common_flags(sub):
    sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--workers", type=int, default=None)
    sub.add_argument("--workers-per-master", type=int, default=None, dest="workers_per_master")
    sub.add_argument("--backend", choices=["inproc", "tcp"], default=None)
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--min-inner", type=int, default=None, dest="min_inner",
                     help="minimum inner solver iterations per subproblem")


def cmd_solve(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    config = _apply_overrides(config, args)
    if not config.out_dir:
        config = dataclasses.replace(config, out_dir="run-out")
    try:
        report = solve(config)
    except (RunAborted, TransportFailure) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    status = "converged" if report.converged else "iteration-capped"
    print(
        f"{status}: {report.iterations} iterations, objective {report.final_objective:.6g}, "
        f"wall clock {report.wall_clock:.3f}s, outputs in {config.out_dir}"
    )
    return 0 if report.converged else 2


def cmd_bench(args) -> int:
    config = load_config(args.config) if args.config else RunConfig()
    config = _apply_overrides(config, args)
    counts = [int(w) for w in args.worker_counts.split(",")]
    out = config.out_dir or "bench-out"
    rows = bench(config, counts, out)
    for row in rows:
        print(row)
    failed = any(r["status"] != "ok" for r in rows)
    return 1 if failed else 0


def cmd_report(args) -> int:
    try:
        written = report_directory(args.run_dir, bins=args.bins)
    except FileNotFoundError as exc:
        print(f"report failed: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


def report_directory(run_dir, bins: int = 20) -> list[str]:
    """Emit plot-ready CSVs next to the run (or bench) artifacts."""
    written = []
    report_path = os.path.join(run_dir, "report.json")
    bench_path = os.path.join(run_dir, "bench.csv")
    if not os.path.exists(report_path) and not os.path.exists(bench_path):
        raise FileNotFoundError(f"{run_dir} contains neither report.json nor bench.csv")
    if os.path.exists(report_path):
        with open(report_path) as fh:
            report = RunReport.from_json(fh.read())
        ledger = read_ledger_csv(os.path.join(run_dir, "ledger.csv"))
        written += _emit_run_csvs(run_dir, report, ledger, bins)
    if os.path.exists(bench_path):
        written += _emit_bench_csvs(run_dir, bench_path)
    return written


def _emit_run_csvs(run_dir, report: RunReport, ledger, bins) -> list[str]:
    written = []

    def out(name, header, rows):
        path = os.path.join(run_dir, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    out(
        "residuals.csv",
        ["k", "r", "s", "rho"],
        [(k, r, s, rho) for k, (r, s, rho) in enumerate(zip(report.trace_r, report.trace_s, report.trace_rho))],
    )

    entries = ledger.entries()
    series = {"idle": [], "comp": [], "delay": [], "comm": []}
    for e in entries:
        if e.t_idle is not None:
            series["idle"].append(e.t_idle)
        if e.t_comp is not None:
            series["comp"].append(e.t_comp)
        if e.t_delay is not None:
            series["delay"].append(e.t_delay)
        if e.t_idle is not None and e.t_comp is not None and e.t_delay is not None:
            series["comm"].append(derive_comm_queue(e)[0])
    for metric, values in series.items():
        if values:
            counts, edges = np.histogram(values, bins=bins)
            rows = [(edges[i], edges[i + 1], int(counts[i])) for i in range(len(counts))]
        else:
            rows = []
        out(f"hist_{metric}.csv", ["bin_lo", "bin_hi", "count"], rows)

    avg_rows = [
        (metric, stats["mean"], stats["std"], stats["workers"])
        for metric, stats in report.timing.items()
    ]
    out("avg_times.csv", ["metric", "mean", "std", "workers"], avg_rows)

    cs = sorted(report.cold_starts.items())
    out("coldstart.csv", ["worker", "cold_start"], cs)

    iterations = max(report.iterations, 1)
    if entries and report.num_workers:
        fractions = responsiveness_histogram(ledger, report.num_workers)
        width = 1.0 / iterations
        nbins = iterations + 1
        counts = [0] * nbins
        for frac in fractions.values():
            counts[min(int(frac / width), nbins - 1)] += 1
        rows = [(i * width, (i + 1) * width, counts[i]) for i in range(nbins)]
    else:
        rows = []
    out("slowest.csv", ["bin_lo", "bin_hi", "workers"], rows)
    return written


def _emit_bench_csvs(run_dir, bench_path) -> list[str]:
    with open(bench_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    speed_path = os.path.join(run_dir, "speedup.csv")
    with open(speed_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["W", "speedup", "efficiency"])
        for row in rows:
            if row["status"] == "ok" and row["speedup"]:
                w.writerow([row["W"], row["speedup"], row["efficiency"]])
    written = [speed_path]

    cs_rows = []
    for row in rows:
        sub = os.path.join(run_dir, f"w{row['W']}", "report.json")
        if os.path.exists(sub):
            with open(sub) as fh:
                rep = json.load(fh)
            values = list(rep.get("cold_starts", {}).values())
            if values:
                cs_rows.append((row["W"], min(values), max(values)))
    cs_path = os.path.join(run_dir, "coldstart.csv")
    with open(cs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["W", "fastest", "slowest"])
        w.writerows(cs_rows)
    written.append(cs_path)
    return written


def main(argv=None) -> int:
    level = os.environ.get("ADMM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    parser = argparse.ArgumentParser(prog="staradmm", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_solve = subs.add_parser("solve", help="run one distributed solve")
    _common_flags(p_solve)
    p_solve.set_defaults(func=cmd_solve)

    p_bench = subs.add_parser("bench", help="sweep worker counts and tabulate speedup")
    _common_flags(p_bench)
    p_bench.add_argument("--worker-counts", default="1,2,4", dest="worker_counts",
                         help="comma-separated nondecreasing W values")
    p_bench.set_defaults(func=cmd_bench)

    p_report = subs.add_parser("report", help="emit plot-ready CSVs for a run directory")
    p_report.add_argument("run_dir")
    p_report.add_argument("--bins", type=int, default=20)
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
