"""End-to-end orchestration: one scheduler, M master loops, W workers.

The scheduler listens, registers workers, and fair-queues their traffic; a
dispatcher thread routes updates round-robin to the master loops; the
master that sees the last update of an iteration runs the boundary block
(z-update, residuals, penalty, convergence, broadcast) under the state
lock. Worker aborts, protocol violations, and lost connections fail-stop
the whole run.
"""

from __future__ import annotations

import logging
import math
import os
import queue
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .admm import SchedulerState, Tolerances, converged, new_penalty, reduce_update, residuals, z_update
from .errors import ContractViolation, ProtocolViolation, RunAborted, TransportFailure
from .kernels import FistaConfig
from .metrics import RunReport, TimingLedger, aggregate, write_ledger_csv
from .problem import ProblemSpec, partition
from .reference import full_objective
from .runtime import ColdStartDelay, SpawnRequest, cold_start_time, spawn_pool
from .transport import InProcHub, Message, RoundRobinDispatcher, TcpHub, Variant, encode

log = logging.getLogger("staradmm")

_MASTER_POLL = 0.1
_TERM_SENTINEL = object()


@dataclass
class RunConfig:
    """One solve, fully specified; round-trips through the flat config file."""

    num_samples: int = 20_000
    dimension: int = 2_000
    density: float = 0.005
    l1_weight: float = 1.0
    seed: int = 42
    workers: int = 4
    workers_per_master: int = 8
    rho0: float = 1.0
    primal_tol: float = 2e-2
    dual_tol: float = 2e-2
    max_outer: int = 100
    min_inner: int = 1
    max_inner: int = 500
    grad_tol: float = 1e-2
    rel_improve_tol: float = 1e-12
    initial_lipschitz: float = 1.0
    backtrack_factor: float = 2.0
    backend: str = "inproc"
    endpoint: str = "127.0.0.1:0"
    time_limit: float = 900.0
    coldstart_delay: float = 0.0
    coldstart_jitter: float = 0.0
    out_dir: str = ""

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(self.num_samples, self.dimension, self.density, self.l1_weight, self.seed)

    def tolerances(self) -> Tolerances:
        return Tolerances(self.primal_tol, self.dual_tol, self.max_outer)

    def fista_config(self) -> FistaConfig:
        return FistaConfig(
            self.min_inner,
            self.grad_tol,
            self.rel_improve_tol,
            self.max_inner,
            self.initial_lipschitz,
            self.backtrack_factor,
        )

    def num_masters(self) -> int:
        if self.workers_per_master < 1:
            raise ContractViolation("workers_per_master must be >= 1")
        return math.ceil(self.workers / self.workers_per_master)


class _SchedulerCore:
    """State shared by the master loops; boundary runs under the lock."""

    def __init__(self, spec, tol, num_workers, num_masters, hub, dispatcher, ledger, record_z):
        self.spec = spec
        self.tol = tol
        self.num_workers = num_workers
        self.num_masters = num_masters
        self.hub = hub
        self.dispatcher = dispatcher
        self.ledger = ledger
        self.lock = threading.Lock()
        self.state: SchedulerState | None = None
        self.trace_r: list[float] = []
        self.trace_s: list[float] = []
        self.trace_rho: list[float] = []
        self.z_history: list[np.ndarray] | None = [] if record_z else None
        self.broadcast_times: dict[int, float] = {}
        self.term_decided_at: float | None = None
        self.converged_by_tol = False
        self.stop = threading.Event()
        self.failure: tuple[str, int | None] | None = None

    def init_state(self, dim, rho0):
        self.state = SchedulerState(dim=dim, rho=rho0)

    def fail(self, reason: str, worker_id=None) -> None:
        with self.lock:
            if self.stop.is_set():
                return
            self.failure = (reason, worker_id)
            log.error("fail-stop: %s (worker %s)", reason, worker_id)
            self._terminate(self.state.iter if self.state else 0)

    def _terminate(self, iteration: int) -> None:
        # lock held; Term goes to every worker and every master loop
        self.hub.mark_terminated()
        self.stop.set()
        try:
            self.hub.broadcast(Message.term(iteration))
        except TransportFailure as exc:
            log.warning("Term broadcast incomplete: %s", exc)
        self.dispatcher.send_all(_TERM_SENTINEL)

    def handle_update(self, msg: Message) -> None:
        dequeued_at = time.monotonic()
        with self.lock:
            if self.stop.is_set():
                return
            state = self.state
            k = msg.iteration
            t_delay = dequeued_at - self.broadcast_times[k] if k in self.broadcast_times else None
            self.ledger.record_dequeue(msg.worker_id, k, t_delay)
            q, idle_prev, comp = msg.scalars
            self.ledger.record_update(msg.worker_id, k, comp, idle_prev)
            if k != state.iter:
                raise ProtocolViolation(
                    f"update for iteration {k} from worker {msg.worker_id}, expected {state.iter}"
                )
            reduce_update(state, msg.worker_id, q, msg.vector, self.num_workers)
            if len(state.arrived) == self.num_workers:
                self._iteration_boundary()

    def _iteration_boundary(self) -> None:
        state = self.state
        k = state.iter
        state.z_prev = state.z_curr
        state.z_curr = z_update(state.omega_accum, state.rho, self.spec.l1_weight, self.num_workers)
        r, s = residuals(state)
        rho_next = new_penalty(state.rho, r, s)
        self.trace_r.append(r)
        self.trace_s.append(s)
        self.trace_rho.append(state.rho)
        if self.z_history is not None:
            self.z_history.append(state.z_curr.copy())
        log.info("iteration %d: r=%.6g s=%.6g rho=%.6g", k, r, s, state.rho)
        if converged(r, s, k, self.tol):
            self.converged_by_tol = r <= self.tol.primal_tol and s <= self.tol.dual_tol
            self.term_decided_at = time.monotonic()
            self._terminate(k)
            return
        self.broadcast_times[k + 1] = time.monotonic()
        self.hub.broadcast(Message.broadcast(k + 1, rho_next, state.z_curr))
        state.advance(rho_next)

    def wall_clock(self) -> float:
        if self.term_decided_at is None or 1 not in self.broadcast_times:
            return 0.0
        return self.term_decided_at - self.broadcast_times[1]


def _master_loop(core: _SchedulerCore, mq: queue.Queue) -> None:
    while True:
        try:
            item = mq.get(timeout=_MASTER_POLL)
        except queue.Empty:
            if core.stop.is_set():
                return
            continue
        if item is _TERM_SENTINEL:
            return
        try:
            core.handle_update(item)
        except Exception as exc:  # any master-side error fail-stops the run
            core.fail(str(exc), item.worker_id)


def _dispatch_loop(core: _SchedulerCore) -> None:
    while not core.stop.is_set():
        got = core.hub.inbound.pop(timeout=_MASTER_POLL)
        if got is None:
            continue
        sender, msg = got
        if msg.variant is Variant.UPDATE:
            core.dispatcher.route(msg)
        elif msg.variant is Variant.ABORT:
            core.fail(f"worker aborted: {msg.reason.name.lower().replace('_', '-')}", sender)
        else:
            core.fail(f"unexpected {msg.variant.name} after registration", sender)


def solve(config: RunConfig, record_z: bool = False) -> RunReport:
    """Run one full distributed solve and return its report.

    Raises RunAborted on fail-stop. Writes report.json, ledger.csv and
    z_final.bin into config.out_dir when it is set.
    """
    spec = config.problem_spec()
    tol = config.tolerances()
    fista = config.fista_config()
    num_workers = config.workers
    num_masters = config.num_masters()
    ledger = TimingLedger()

    if config.backend == "inproc":
        hub = InProcHub(num_workers)
        endpoint = "inproc"
        worker_backend = "in-process"
    elif config.backend == "tcp":
        host, port = config.endpoint.rsplit(":", 1)
        hub = TcpHub(num_workers, host, int(port))
        endpoint = hub.endpoint
        worker_backend = "process"
    else:
        raise ContractViolation(f"unknown backend {config.backend!r}")

    dispatcher = RoundRobinDispatcher(num_masters)
    core = _SchedulerCore(spec, tol, num_workers, num_masters, hub, dispatcher, ledger, record_z)
    core.init_state(spec.dimension, config.rho0)
    hub.on_worker_lost = lambda wid: core.fail("connection lost", wid)

    requests = [
        SpawnRequest(
            worker_id=w,
            spec=spec,
            sample_range=partition(spec.num_samples, num_workers, w),
            rho0=config.rho0,
            fista=fista,
            scheduler_endpoint=endpoint,
            time_limit=config.time_limit,
        )
        for w in range(1, num_workers + 1)
    ]

    threads = [
        threading.Thread(target=_dispatch_loop, args=(core,), name="dispatcher", daemon=True)
    ]
    for m in range(num_masters):
        threads.append(
            threading.Thread(
                target=_master_loop, args=(core, dispatcher.queues[m]), name=f"master-{m}", daemon=True
            )
        )
    for t in threads:
        t.start()

    delay = None
    if config.coldstart_delay > 0 or config.coldstart_jitter > 0:
        delay = ColdStartDelay(config.coldstart_delay, config.coldstart_jitter)
    pool = spawn_pool(
        requests,
        worker_backend,
        hub=hub if worker_backend == "in-process" else None,
        delay=delay,
        delay_seed=config.seed,
    )

    registration_grace = 120.0 + config.coldstart_delay + config.coldstart_jitter

    def watchdog():
        deadline = time.monotonic() + registration_grace
        while not core.stop.is_set() and time.monotonic() < deadline:
            if hub.wait_all_registered(0.2):
                return
        if not core.stop.is_set() and not hub.wait_all_registered(0):
            core.fail("worker registration timed out")

    threading.Thread(target=watchdog, name="registration-watchdog", daemon=True).start()

    try:
        if tol.max_outer == 0:
            # nothing to iterate: wait for the fleet, then send everyone home
            hub.wait_all_registered(timeout=registration_grace)
            with core.lock:
                core.term_decided_at = time.monotonic()
                core._terminate(0)
        for t in threads:
            t.join()
        outcomes = pool.join(timeout=60.0)
    finally:
        hub.close()

    hellos = hub.hello_times()
    for req in requests:
        wid = req.worker_id
        if wid in hellos:
            stamped = replace(req, created_at=pool.created_at[wid])
            ledger.record_cold_start(wid, cold_start_time(stamped, hellos[wid]))

    if core.failure is not None:
        reason, wid = core.failure
        raise RunAborted(reason, wid)

    z_final = core.state.z_curr
    report = RunReport(
        num_workers=num_workers,
        num_masters=num_masters,
        spec=dict(
            num_samples=spec.num_samples,
            dimension=spec.dimension,
            density=spec.density,
            l1_weight=spec.l1_weight,
            seed=spec.seed,
        ),
        iterations=len(core.trace_r),
        converged=core.converged_by_tol,
        final_objective=full_objective(spec, z_final),
        trace_r=core.trace_r,
        trace_s=core.trace_s,
        trace_rho=core.trace_rho,
        wall_clock=core.wall_clock(),
        timing=aggregate(ledger),
        cold_starts=dict(sorted(ledger.cold_starts.items())),
        clock_skew_clamps=ledger.clock_skew_clamps,
        worker_outcomes={w: o.exit.value for w, o in outcomes.items()},
        z_history=core.z_history,
    )
    if config.out_dir:
        write_outputs(config.out_dir, report, ledger, z_final, core.trace_rho, len(core.trace_r))
    return report


def write_outputs(out_dir, report: RunReport, ledger: TimingLedger, z_final, trace_rho, iterations):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        fh.write(report.to_json())
    write_ledger_csv(ledger, os.path.join(out_dir, "ledger.csv"))
    rho_final = trace_rho[-1] if trace_rho else 0.0
    frame = Message.broadcast(max(iterations - 1, 0), rho_final, z_final) if len(z_final) else None
    with open(os.path.join(out_dir, "z_final.bin"), "wb") as fh:
        if frame is not None:
            fh.write(encode(frame))


def bench(config: RunConfig, worker_counts: list[int], out_dir: str) -> list[dict]:
    """Solve the same instance for each W; speedup/efficiency vs the first W.

    Returns one row per W; failed runs are marked and do not stop the sweep.
    """
    if list(worker_counts) != sorted(worker_counts):
        raise ContractViolation("worker counts must be nondecreasing")
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    baseline = None  # (wall_clock, W) of the first successful run
    for w in worker_counts:
        cfg = RunConfig(**{**config.__dict__, "workers": w, "out_dir": os.path.join(out_dir, f"w{w}")})
        row = {"W": w, "status": "ok", "wall_clock": "", "iterations": "",
               "final_objective": "", "speedup": "", "efficiency": ""}
        try:
            report = solve(cfg)
        except (RunAborted, TransportFailure) as exc:
            row["status"] = f"failed: {exc}"
            rows.append(row)
            continue
        row["wall_clock"] = report.wall_clock
        row["iterations"] = report.iterations
        row["final_objective"] = report.final_objective
        if baseline is None and report.wall_clock > 0:
            baseline = (report.wall_clock, w)
        if baseline is not None and report.wall_clock > 0:
            s = baseline[0] / report.wall_clock
            row["speedup"] = s
            row["efficiency"] = s / (w / baseline[1])
        rows.append(row)
    _write_bench_csv(os.path.join(out_dir, "bench.csv"), rows)
    return rows


def _write_bench_csv(path, rows):
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["W", "wall_clock", "iterations", "final_objective", "speedup", "efficiency", "status"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
