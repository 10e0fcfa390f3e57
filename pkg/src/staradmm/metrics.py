"""Timing ledger and derived benchmark measures.

Per (worker, iteration) the ledger holds three raw durations:

    t_idle   worker clock, update sent -> next broadcast received
    t_comp   worker clock, broadcast received -> update sent
    t_delay  scheduler clock, broadcast instant -> master dequeues the
             worker's update (dequeue instant, recorded in the CSV header)

from which communication and queueing are derived as

    t_comm  = t_delay - t_comp
    t_queue = t_idle - t_delay

Negative derived values (clock resolution/skew) clamp to zero and are
counted. Iteration 0 follows no broadcast, so its t_delay and the derived
fields stay empty; the final iteration has no t_idle.
"""

from __future__ import annotations

import csv
import json
import math
import threading
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import ContractViolation

CSV_COMMENT = "# t_delay is measured from the broadcast instant to the master dequeue instant"
CSV_COLUMNS = ["worker", "iter", "t_idle", "t_comp", "t_delay", "t_comm", "t_queue", "arrival_rank"]


@dataclass
class LedgerEntry:
    worker: int
    iteration: int
    t_idle: float | None = None
    t_comp: float | None = None
    t_delay: float | None = None
    arrival_rank: int | None = None


class TimingLedger:
    """Write-once, per-(worker, iteration) timing records."""

    def __init__(self):
        self._entries: dict[tuple[int, int], LedgerEntry] = {}
        self._rank_counters: dict[int, int] = {}
        self._lock = threading.Lock()
        self.cold_starts: dict[int, float] = {}
        self.clock_skew_clamps = 0

    def _entry(self, worker: int, iteration: int) -> LedgerEntry:
        key = (worker, iteration)
        if key not in self._entries:
            self._entries[key] = LedgerEntry(worker, iteration)
        return self._entries[key]

    def record_update(self, worker, iteration, t_comp, t_idle_prev) -> None:
        """Worker-clock timings carried on an Update message."""
        with self._lock:
            if not math.isnan(t_comp):
                self._entry(worker, iteration).t_comp = t_comp
            if iteration > 0 and not math.isnan(t_idle_prev):
                self._entry(worker, iteration - 1).t_idle = t_idle_prev

    def record_dequeue(self, worker, iteration, t_delay) -> int:
        """Scheduler-clock delay; assigns the arrival rank. Returns the rank."""
        with self._lock:
            rank = self._rank_counters.get(iteration, 0) + 1
            self._rank_counters[iteration] = rank
            e = self._entry(worker, iteration)
            e.arrival_rank = rank
            if t_delay is not None:
                e.t_delay = t_delay
            return rank

    def record_cold_start(self, worker, seconds) -> None:
        with self._lock:
            self.cold_starts[worker] = seconds

    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return sorted(self._entries.values(), key=lambda e: (e.worker, e.iteration))

    def workers(self) -> list[int]:
        return sorted({e.worker for e in self.entries()})


def derive_comm_queue(entry: LedgerEntry, ledger: TimingLedger | None = None):
    """(t_comm, t_queue) for one complete entry, clamped at zero."""
    if entry.t_idle is None or entry.t_comp is None or entry.t_delay is None:
        raise ContractViolation("entry is incomplete")
    t_comm = entry.t_delay - entry.t_comp
    t_queue = entry.t_idle - entry.t_delay
    clamps = 0
    if t_comm < 0:
        t_comm, clamps = 0.0, clamps + 1
    if t_queue < 0:
        t_queue, clamps = 0.0, clamps + 1
    if ledger is not None and clamps:
        ledger.clock_skew_clamps += clamps
    return t_comm, t_queue


def speedup(t_old: float, t_new: float) -> float:
    """Wall-clock ratio t_old / t_new."""
    if t_old <= 0 or t_new <= 0:
        raise ContractViolation("wall-clock times must be positive")
    return t_old / t_new


def efficiency(s: float, w_new: int, w_old: int) -> float:
    """Speedup divided by the worker-count ratio."""
    if w_new <= 0 or w_old <= 0:
        raise ContractViolation("worker counts must be positive")
    return s / (w_new / w_old)


def slow_set_size(num_workers: int) -> int:
    # "slowest 10%", ceiling so the set is nonempty for small W
    return math.ceil(0.1 * num_workers)


def responsiveness_histogram(ledger: TimingLedger, num_workers: int) -> dict[int, float]:
    """Per worker, the fraction of iterations spent among the slowest 10%.

    An iteration's slow set is its ceil(0.1 W) largest arrival ranks.
    """
    flagged = {w: 0 for w in ledger.workers()}
    iters = 0
    k_slow = slow_set_size(num_workers)
    by_iter: dict[int, list[LedgerEntry]] = {}
    for e in ledger.entries():
        if e.arrival_rank is not None:
            by_iter.setdefault(e.iteration, []).append(e)
    for _, group in sorted(by_iter.items()):
        ranks = sorted(e.arrival_rank for e in group)
        if ranks != list(range(1, num_workers + 1)):
            raise ContractViolation("arrival ranks are not a permutation of 1..W")
        iters += 1
        cutoff = num_workers - k_slow
        for e in group:
            if e.arrival_rank > cutoff:
                flagged[e.worker] += 1
    if iters == 0:
        return {w: 0.0 for w in flagged}
    return {w: flagged[w] / iters for w in sorted(flagged)}


def aggregate(ledger: TimingLedger) -> dict[str, dict[str, float]]:
    """Two-stage averages: per worker over its iterations, then over workers.

    Returns {metric: {mean, std, workers}} for idle/comp/delay/comm/queue;
    std is taken across the per-worker means.
    """
    per_worker: dict[str, dict[int, list[float]]] = {
        "idle": {}, "comp": {}, "delay": {}, "comm": {}, "queue": {}
    }
    for e in ledger.entries():
        if e.t_idle is not None:
            per_worker["idle"].setdefault(e.worker, []).append(e.t_idle)
        if e.t_comp is not None:
            per_worker["comp"].setdefault(e.worker, []).append(e.t_comp)
        if e.t_delay is not None:
            per_worker["delay"].setdefault(e.worker, []).append(e.t_delay)
        if e.t_idle is not None and e.t_comp is not None and e.t_delay is not None:
            t_comm, t_queue = derive_comm_queue(e)
            per_worker["comm"].setdefault(e.worker, []).append(t_comm)
            per_worker["queue"].setdefault(e.worker, []).append(t_queue)
    out = {}
    for metric, workers in per_worker.items():
        means = [float(np.mean(vals)) for _, vals in sorted(workers.items())]
        if means:
            out[metric] = {
                "mean": float(np.mean(means)),
                "std": float(np.std(means)),
                "workers": len(means),
            }
        else:
            out[metric] = {"mean": float("nan"), "std": float("nan"), "workers": 0}
    return out


def write_ledger_csv(ledger: TimingLedger, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(CSV_COMMENT + "\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for e in ledger.entries():
            complete = e.t_idle is not None and e.t_comp is not None and e.t_delay is not None
            t_comm, t_queue = derive_comm_queue(e) if complete else ("", "")
            writer.writerow(
                [
                    e.worker,
                    e.iteration,
                    "" if e.t_idle is None else repr(e.t_idle),
                    "" if e.t_comp is None else repr(e.t_comp),
                    "" if e.t_delay is None else repr(e.t_delay),
                    "" if t_comm == "" else repr(t_comm),
                    "" if t_queue == "" else repr(t_queue),
                    "" if e.arrival_rank is None else e.arrival_rank,
                ]
            )


def read_ledger_csv(path) -> TimingLedger:
    ledger = TimingLedger()
    with open(path, newline="") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(rows)
    for row in reader:
        e = ledger._entry(int(row["worker"]), int(row["iter"]))
        e.t_idle = float(row["t_idle"]) if row["t_idle"] else None
        e.t_comp = float(row["t_comp"]) if row["t_comp"] else None
        e.t_delay = float(row["t_delay"]) if row["t_delay"] else None
        e.arrival_rank = int(row["arrival_rank"]) if row["arrival_rank"] else None
    return ledger


@dataclass
class RunReport:
    """Everything one solve produced, minus the raw ledger."""

    num_workers: int
    num_masters: int
    spec: dict
    iterations: int
    converged: bool  # by tolerance (False also covers iteration-capped)
    final_objective: float
    trace_r: list = field(default_factory=list)
    trace_s: list = field(default_factory=list)
    trace_rho: list = field(default_factory=list)
    wall_clock: float = 0.0
    timing: dict = field(default_factory=dict)
    cold_starts: dict = field(default_factory=dict)
    clock_skew_clamps: int = 0
    worker_outcomes: dict = field(default_factory=dict)
    z_history: list | None = None

    def __post_init__(self):
        if len(self.trace_r) != self.iterations:
            raise ContractViolation("residual trace length must equal iterations")

    def to_json(self) -> str:
        doc = asdict(self)
        if doc["z_history"] is not None:
            doc["z_history"] = [np.asarray(z).tolist() for z in doc["z_history"]]
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        doc = json.loads(text)
        doc["cold_starts"] = {int(k): v for k, v in doc.get("cold_starts", {}).items()}
        doc["worker_outcomes"] = {int(k): v for k, v in doc.get("worker_outcomes", {}).items()}
        if doc.get("z_history") is not None:
            doc["z_history"] = [np.array(z) for z in doc["z_history"]]
        return cls(**doc)
