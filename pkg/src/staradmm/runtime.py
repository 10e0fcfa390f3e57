"""Worker lifecycle emulating stateless, time-limited cloud functions.

A worker is handed one SpawnRequest that carries everything it needs
(problem description, sample range, solver options, scheduler endpoint);
there is no other channel for state. Workers regenerate their shard,
say Hello, then loop compute/send/receive until Term. The process backend
serializes the request as a single base64 argument and maps outcomes to
exit codes: 0 normal, 2 time limit, 3 numerical, 4 transport.
"""

from __future__ import annotations

import base64
import enum
import math
import struct
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, replace

import numpy as np

from .admm import WorkerState, worker_step
from .errors import ContractViolation, DecodeError, NumericalFailure, TransportFailure
from .kernels import FistaConfig
from .problem import ProblemSpec, SampleRange, generate_shard
from .transport import InProcHub, Message, Reason, TcpChannel, Variant

SPAWN_MAGIC = b"ADMQ"
SPAWN_VERSION = 1


class ExitCause(enum.Enum):
    TERMINATED_NORMALLY = "terminated-normally"
    TIME_LIMIT_EXCEEDED = "time-limit-exceeded"
    NUMERICAL_FAILURE = "numerical-failure"
    TRANSPORT_FAILURE = "transport-failure"


EXIT_CODES = {
    ExitCause.TERMINATED_NORMALLY: 0,
    ExitCause.TIME_LIMIT_EXCEEDED: 2,
    ExitCause.NUMERICAL_FAILURE: 3,
    ExitCause.TRANSPORT_FAILURE: 4,
}
_CAUSE_BY_CODE = {v: k for k, v in EXIT_CODES.items()}


@dataclass(frozen=True)
class SpawnRequest:
    """Complete state a stateless worker needs, embedded in the spawn call."""

    worker_id: int
    spec: ProblemSpec
    sample_range: SampleRange
    rho0: float
    fista: FistaConfig
    scheduler_endpoint: str
    time_limit: float
    created_at: float = 0.0


@dataclass
class WorkerOutcome:
    worker_id: int
    exit: ExitCause
    iterations: int
    idle_times: dict | None = None  # iteration -> seconds, worker clock
    comp_times: dict | None = None


def encode_spawn_request(req: SpawnRequest) -> bytes:
    """Fixed little-endian layout with the endpoint length-prefixed at the end."""
    endpoint = req.scheduler_endpoint.encode("utf-8")
    head = struct.pack(
        "<4sBIQQddQQQdIIddddd",
        SPAWN_MAGIC,
        SPAWN_VERSION,
        req.worker_id,
        req.spec.num_samples,
        req.spec.dimension,
        req.spec.density,
        req.spec.l1_weight,
        req.spec.seed,
        req.sample_range.start,
        req.sample_range.end,
        req.rho0,
        req.fista.min_iters,
        req.fista.max_iters,
        req.fista.grad_tol,
        req.fista.rel_improve_tol,
        req.fista.initial_lipschitz,
        req.fista.backtrack_factor,
        req.time_limit,
    )
    return head + struct.pack("<d", req.created_at) + struct.pack("<I", len(endpoint)) + endpoint


def decode_spawn_request(data: bytes) -> SpawnRequest:
    head_fmt = "<4sBIQQddQQQdIIddddd"
    head_size = struct.calcsize(head_fmt)
    if len(data) < head_size + 12:
        raise DecodeError("payload length mismatch", "spawn request truncated")
    (magic, version, worker_id, n, d, density, l1, seed, start, end, rho0,
     min_iters, max_iters, grad_tol, rel_tol, lip0, eta, time_limit) = struct.unpack_from(head_fmt, data)
    if magic != SPAWN_MAGIC:
        raise DecodeError("magic", f"expected {SPAWN_MAGIC!r}")
    if version != SPAWN_VERSION:
        raise DecodeError("version", f"unknown version {version}")
    off = head_size
    (created_at,) = struct.unpack_from("<d", data, off)
    off += 8
    (ep_len,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) != off + ep_len:
        raise DecodeError("payload length mismatch", "endpoint length disagrees")
    endpoint = data[off:].decode("utf-8")
    return SpawnRequest(
        worker_id=worker_id,
        spec=ProblemSpec(n, d, density, l1, seed),
        sample_range=SampleRange(start, end),
        rho0=rho0,
        fista=FistaConfig(min_iters, grad_tol, rel_tol, max_iters, lip0, eta),
        scheduler_endpoint=endpoint,
        time_limit=time_limit,
        created_at=created_at,
    )


def spawn_request_to_arg(req: SpawnRequest) -> str:
    return base64.b64encode(encode_spawn_request(req)).decode("ascii")


def spawn_request_from_arg(arg: str) -> SpawnRequest:
    return decode_spawn_request(base64.b64decode(arg.encode("ascii")))


def cold_start_time(req: SpawnRequest, hello_received_at: float) -> float:
    """Spawn-request creation to first contact, both on the scheduler clock."""
    return hello_received_at - req.created_at


def _default_channel_factory(endpoint: str):
    return TcpChannel(endpoint)


def worker_main(req: SpawnRequest, channel_factory=None) -> WorkerOutcome:
    """Algorithm run by one worker: load data, Hello, iterate until Term."""
    start = time.monotonic()
    factory = channel_factory or _default_channel_factory
    dataset = generate_shard(req.spec, req.sample_range)
    state = WorkerState.initial(req.spec.dimension, req.rho0)
    idle_times: dict[int, float] = {}
    comp_times: dict[int, float] = {}

    def expired() -> bool:
        return time.monotonic() - start > req.time_limit

    channel = None
    try:
        channel = factory(req.scheduler_endpoint)
        channel.send(Message.hello(req.worker_id))
        rho = req.rho0
        z = np.zeros(req.spec.dimension)
        k = 0
        idle_prev = math.nan
        compute_began = time.monotonic()
        while True:
            q, omega = worker_step(state, rho, z, dataset, req.fista)
            now = time.monotonic()
            comp = now - compute_began
            comp_times[k] = comp
            if expired():
                channel.send(Message.abort(req.worker_id, k, Reason.TIME_LIMIT))
                return WorkerOutcome(req.worker_id, ExitCause.TIME_LIMIT_EXCEEDED, k,
                                     idle_times, comp_times)
            channel.send(Message.update(req.worker_id, k, q, idle_prev, comp, omega))
            sent = time.monotonic()
            msg = channel.recv()
            received = time.monotonic()
            if msg.variant is Variant.TERM:
                return WorkerOutcome(req.worker_id, ExitCause.TERMINATED_NORMALLY, k + 1,
                                     idle_times, comp_times)
            if msg.variant is Variant.ABORT:
                return WorkerOutcome(req.worker_id, ExitCause.TRANSPORT_FAILURE, k,
                                     idle_times, comp_times)
            if msg.variant is not Variant.BROADCAST:
                raise TransportFailure(f"unexpected {msg.variant.name} from scheduler")
            idle_prev = received - sent
            idle_times[k] = idle_prev
            rho = msg.scalars[0]
            z = msg.vector
            k += 1
            compute_began = received
    except NumericalFailure:
        if channel is not None:
            try:
                channel.send(Message.abort(req.worker_id, state.iter, Reason.NUMERICAL))
            except TransportFailure:
                pass
        return WorkerOutcome(req.worker_id, ExitCause.NUMERICAL_FAILURE, state.iter,
                             idle_times, comp_times)
    except TransportFailure:
        return WorkerOutcome(req.worker_id, ExitCause.TRANSPORT_FAILURE, state.iter,
                             idle_times, comp_times)
    finally:
        if channel is not None:
            channel.close()


# ---------------------------------------------------------------------------
# pools

@dataclass
class ColdStartDelay:
    """Artificial spawn latency: fixed seconds plus uniform jitter."""

    fixed: float = 0.0
    jitter: float = 0.0

    def sample(self, rng) -> float:
        return self.fixed + (self.jitter * rng.random() if self.jitter > 0 else 0.0)


class PoolHandle:
    """Join/abort handle over one batch of spawned workers."""

    def __init__(self, backend: str):
        self.backend = backend
        self.created_at: dict[int, float] = {}
        self._threads: list[threading.Thread] = []
        self._procs: dict[int, subprocess.Popen] = {}
        self._outcomes: dict[int, WorkerOutcome] = {}
        self._lock = threading.Lock()

    def _store(self, outcome: WorkerOutcome) -> None:
        with self._lock:
            self._outcomes[outcome.worker_id] = outcome

    def join(self, timeout: float | None = None) -> dict[int, WorkerOutcome]:
        deadline = None if timeout is None else time.monotonic() + timeout
        for t in self._threads:
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            t.join(remaining)
        for wid, proc in self._procs.items():
            remaining = None if deadline is None else max(0.0, deadline - time.monotonic())
            try:
                code = proc.wait(remaining)
            except subprocess.TimeoutExpired:
                proc.kill()
                code = proc.wait()
            cause = _CAUSE_BY_CODE.get(code, ExitCause.TRANSPORT_FAILURE)
            self._store(WorkerOutcome(wid, cause, -1))
        return dict(sorted(self._outcomes.items()))

    def abort(self) -> None:
        for proc in self._procs.values():
            if proc.poll() is None:
                proc.terminate()


def spawn_pool(
    requests: list[SpawnRequest],
    backend: str,
    hub: InProcHub | None = None,
    delay: ColdStartDelay | None = None,
    delay_seed: int = 0,
) -> PoolHandle:
    """Launch all workers concurrently; created_at is stamped before launch.

    backend "in-process" runs workers as threads against `hub`; "process"
    launches one interpreter per worker that dials the TCP endpoint in its
    request.
    """
    ids = [r.worker_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ContractViolation("worker ids must be unique")
    if backend not in ("in-process", "process"):
        raise ContractViolation(f"unknown backend {backend!r}")
    if backend == "in-process" and hub is None:
        raise ContractViolation("in-process backend needs a hub")
    pool = PoolHandle(backend)
    rng = np.random.default_rng(delay_seed)
    delays = [(delay.sample(rng) if delay else 0.0) for _ in requests]
    # the whole bulk is generated first, so launch serialization (the
    # artificial delays below) shows up as growing cold starts
    stamped = []
    for req in requests:
        s = replace(req, created_at=time.monotonic())
        pool.created_at[req.worker_id] = s.created_at
        stamped.append(s)
    try:
        for req, pause in zip(stamped, delays):
            if pause > 0:
                time.sleep(pause)
            if backend == "in-process":
                def run(r=req):
                    try:
                        outcome = worker_main(r, channel_factory=lambda _ep: hub.connect())
                    except Exception:  # never leave the scheduler waiting on a dead thread
                        outcome = WorkerOutcome(r.worker_id, ExitCause.TRANSPORT_FAILURE, 0)
                        if hub.on_worker_lost is not None:
                            hub.on_worker_lost(r.worker_id)
                    pool._store(outcome)

                t = threading.Thread(target=run, name=f"worker-{req.worker_id}", daemon=True)
                t.start()
                pool._threads.append(t)
            else:
                proc = subprocess.Popen(
                    [sys.executable, "-m", "staradmm.worker_entry", spawn_request_to_arg(req)]
                )
                pool._procs[req.worker_id] = proc
    except Exception:
        pool.abort()
        raise
    return pool
