"""Star-network messaging: wire format, fair queuing, and two backends.

All traffic uses one frame layout:

    magic "ADM1" | version u8 | variant u8 | worker_id u32 | iter u32
    | payload_len u64 | payload (little-endian float64s)

The payload starts with a variant-specific scalar block, followed by the
vector for Update (omega) and Broadcast (z). Update's scalar block is
(q, idle_prev, comp): the residual magnitude plus the sender's own idle and
compute timings, which is how worker-clock measurements reach the
scheduler. Abort's single scalar is a reason code.

Backends: `InProcHub` moves Message values over bounded queues between
threads; `TcpHub` listens on a socket and speaks the same frames over one
long-lived connection per worker. Both feed a fair inbound queue (no
sender is served twice while another sender has a message pending).
"""

from __future__ import annotations

import enum
import math
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DecodeError, TransportFailure

MAGIC = b"ADM1"
VERSION = 1
HEADER = struct.Struct("<4sBBIIQ")  # 22 bytes


class Variant(enum.IntEnum):
    HELLO = 0
    UPDATE = 1
    BROADCAST = 2
    TERM = 3
    ABORT = 4


class Reason(enum.IntEnum):
    DUPLICATE_ID = 1
    LATE_JOIN = 2
    TIME_LIMIT = 3
    NUMERICAL = 4
    TRANSPORT = 5


_SCALAR_COUNT = {
    Variant.HELLO: 0,
    Variant.UPDATE: 3,
    Variant.BROADCAST: 1,
    Variant.TERM: 0,
    Variant.ABORT: 1,
}
_HAS_VECTOR = {Variant.UPDATE, Variant.BROADCAST}


@dataclass(frozen=True, eq=False)
class Message:
    variant: Variant
    worker_id: int = 0
    iteration: int = 0
    scalars: tuple = ()
    vector: np.ndarray | None = None

    def __post_init__(self):
        if len(self.scalars) != _SCALAR_COUNT[self.variant]:
            raise ContractViolation(
                f"{self.variant.name} takes {_SCALAR_COUNT[self.variant]} scalars"
            )
        if self.variant in _HAS_VECTOR:
            if self.vector is None or len(self.vector) == 0:
                raise ContractViolation(f"{self.variant.name} requires a vector payload")
            frozen = np.array(self.vector, dtype=float)
            frozen.setflags(write=False)
            object.__setattr__(self, "vector", frozen)
        elif self.vector is not None:
            raise ContractViolation(f"{self.variant.name} carries no vector")
        object.__setattr__(self, "scalars", tuple(float(s) for s in self.scalars))

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        if (self.variant, self.worker_id, self.iteration) != (
            other.variant,
            other.worker_id,
            other.iteration,
        ):
            return False
        if len(self.scalars) != len(other.scalars):
            return False
        for a, b in zip(self.scalars, other.scalars):
            if a != b and not (math.isnan(a) and math.isnan(b)):
                return False
        if (self.vector is None) != (other.vector is None):
            return False
        if self.vector is not None:
            return bool(np.array_equal(self.vector, other.vector, equal_nan=True))
        return True

    @property
    def reason(self) -> Reason:
        if self.variant is not Variant.ABORT:
            raise ContractViolation("only Abort carries a reason code")
        return Reason(int(self.scalars[0]))

    # ---- constructors ----
    @classmethod
    def hello(cls, worker_id):
        return cls(Variant.HELLO, worker_id)

    @classmethod
    def update(cls, worker_id, iteration, q, idle_prev, comp, omega):
        return cls(Variant.UPDATE, worker_id, iteration, (q, idle_prev, comp), omega)

    @classmethod
    def broadcast(cls, iteration, rho, z):
        return cls(Variant.BROADCAST, 0, iteration, (rho,), z)

    @classmethod
    def term(cls, iteration=0):
        return cls(Variant.TERM, 0, iteration)

    @classmethod
    def abort(cls, worker_id, iteration, reason: Reason):
        return cls(Variant.ABORT, worker_id, iteration, (float(int(reason)),))


def encode(msg: Message) -> bytes:
    if not (0 <= msg.worker_id < 2**32 and 0 <= msg.iteration < 2**32):
        raise ContractViolation("worker_id and iteration must fit in u32")
    floats = list(msg.scalars)
    if msg.vector is not None:
        floats.extend(msg.vector.tolist())
    payload = struct.pack(f"<{len(floats)}d", *floats)
    header = HEADER.pack(MAGIC, VERSION, int(msg.variant), msg.worker_id, msg.iteration, len(payload))
    return header + payload


def decode(data: bytes) -> Message:
    if len(data) >= 4 and data[:4] != MAGIC:
        raise DecodeError("magic", f"expected {MAGIC!r}")
    if len(data) < HEADER.size:
        raise DecodeError("payload length mismatch", "frame shorter than header")
    magic, version, variant_code, worker_id, iteration, payload_len = HEADER.unpack_from(data)
    if version != VERSION:
        raise DecodeError("version", f"unknown version {version}")
    try:
        variant = Variant(variant_code)
    except ValueError:
        raise DecodeError("variant", f"unknown variant {variant_code}") from None
    if len(data) - HEADER.size != payload_len:
        raise DecodeError(
            "payload length mismatch",
            f"header says {payload_len}, got {len(data) - HEADER.size}",
        )
    if payload_len % 8 != 0:
        raise DecodeError("payload", "length not a multiple of 8")
    floats = np.frombuffer(data, dtype="<f8", offset=HEADER.size)
    n_scalars = _SCALAR_COUNT[variant]
    needs_vector = variant in _HAS_VECTOR
    if needs_vector:
        if len(floats) < n_scalars + 1:
            raise DecodeError("payload", f"{variant.name} requires a vector")
    elif len(floats) != n_scalars:
        raise DecodeError("payload", f"{variant.name} takes exactly {n_scalars} scalars")
    scalars = tuple(float(f) for f in floats[:n_scalars])
    vector = np.array(floats[n_scalars:], dtype=float) if needs_vector else None
    return Message(variant, worker_id, iteration, scalars, vector)


# ---------------------------------------------------------------------------
# fair inbound queue and round-robin dispatch

class FairQueue:
    """Per-sender FIFO queues served round-robin.

    push blocks while the sender already has `capacity` pending items.
    """

    def __init__(self, capacity: int | None = None):
        self._capacity = capacity
        self._queues: dict[int, deque] = {}
        self._order: list[int] = []
        self._cursor = 0
        self._cond = threading.Condition()

    def push(self, sender: int, item, timeout: float | None = None) -> None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            if sender not in self._queues:
                self._queues[sender] = deque()
                self._order.append(sender)
            q = self._queues[sender]
            while self._capacity is not None and len(q) >= self._capacity:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise TransportFailure(f"inbound queue full for sender {sender}")
                self._cond.wait(remaining)
            q.append(item)
            self._cond.notify_all()

    def pop(self, timeout: float | None = None):
        """Next (sender, item) in fair order, or None on timeout."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                n = len(self._order)
                for off in range(n):
                    i = (self._cursor + off) % n
                    sender = self._order[i]
                    q = self._queues[sender]
                    if q:
                        item = q.popleft()
                        self._cursor = (i + 1) % n
                        self._cond.notify_all()
                        return sender, item
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)


class RoundRobinDispatcher:
    """Routes successive updates to master queues 1..M cyclically."""

    def __init__(self, num_masters: int):
        if num_masters < 1:
            raise ContractViolation("need at least one master")
        self.queues = [queue.Queue() for _ in range(num_masters)]
        self._next = 0

    def route(self, msg: Message) -> int:
        i = self._next
        self.queues[i].put(msg)
        self._next = (i + 1) % len(self.queues)
        return i

    def send_all(self, item) -> None:
        for q in self.queues:
            q.put(item)


# ---------------------------------------------------------------------------
# scheduler-side hub shared by both backends

@dataclass
class _Registration:
    port: object  # has .send(Message)
    hello_received_at: float


class SchedulerHub:
    """Registration table, fair inbound queue, and broadcast fan-out."""

    def __init__(self, capacity: int | None = None):
        self.inbound = FairQueue(capacity)
        self._registrations: dict[int, _Registration] = {}
        self._lock = threading.Lock()
        self._all_here = threading.Event()
        self._terminated = False
        self._expected: int | None = None
        self.on_worker_lost = None  # callable(worker_id), set by the driver

    def expect(self, num_workers: int) -> None:
        self._expected = num_workers

    def register(self, worker_id: int, port, received_at: float) -> Message | None:
        """Handle a Hello; returns an Abort to send back, or None on success."""
        with self._lock:
            if self._terminated:
                return Message.abort(worker_id, 0, Reason.LATE_JOIN)
            if worker_id in self._registrations:
                return Message.abort(worker_id, 0, Reason.DUPLICATE_ID)
            self._registrations[worker_id] = _Registration(port, received_at)
            if self._expected is not None and len(self._registrations) >= self._expected:
                self._all_here.set()
        return None

    def submit(self, worker_id: int, msg: Message) -> None:
        self.inbound.push(worker_id, msg)

    def hello_times(self) -> dict[int, float]:
        with self._lock:
            return {w: r.hello_received_at for w, r in self._registrations.items()}

    def registered_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._registrations)

    def wait_all_registered(self, timeout: float) -> bool:
        return self._all_here.wait(timeout)

    def broadcast(self, msg: Message) -> None:
        """Deliver exactly one copy to every registered worker."""
        with self._lock:
            targets = list(self._registrations.items())
        for worker_id, reg in targets:
            try:
                reg.port.send(msg)
            except Exception as exc:
                raise TransportFailure(f"broadcast to worker {worker_id} failed: {exc}") from exc

    def mark_terminated(self) -> None:
        with self._lock:
            self._terminated = True

    @property
    def terminated(self) -> bool:
        return self._terminated

    def close(self) -> None:
        pass


# ---------------------------------------------------------------------------
# in-process backend

class _QueuePort:
    def __init__(self, capacity: int):
        self._q = queue.Queue(maxsize=capacity)

    def send(self, msg: Message) -> None:
        self._q.put(msg)

    def recv(self, timeout: float | None = None) -> Message:
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            raise TransportFailure("receive timed out") from None


class InProcChannel:
    """Worker endpoint of the in-process backend."""

    def __init__(self, hub: "InProcHub", capacity: int):
        self._hub = hub
        self._port = _QueuePort(capacity)
        self._worker_id: int | None = None

    def send(self, msg: Message) -> None:
        if msg.variant is Variant.HELLO:
            reply = self._hub.register(msg.worker_id, self._port, time.monotonic())
            if reply is not None:
                self._port.send(reply)
            else:
                self._worker_id = msg.worker_id
            return
        if self._worker_id is None:
            raise TransportFailure("channel not registered; send Hello first")
        self._hub.submit(self._worker_id, msg)

    def recv(self, timeout: float | None = None) -> Message:
        return self._port.recv(timeout)

    def close(self) -> None:
        pass


class InProcHub(SchedulerHub):
    def __init__(self, num_workers: int):
        super().__init__(capacity=4 * num_workers)
        self.expect(num_workers)
        self._capacity = 4 * num_workers

    def connect(self) -> InProcChannel:
        return InProcChannel(self, self._capacity)


# ---------------------------------------------------------------------------
# TCP backend

def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed")
        buf += chunk
    return buf


def read_frame(sock: socket.socket) -> Message:
    header = _read_exact(sock, HEADER.size)
    magic, version, _, _, _, payload_len = HEADER.unpack(header)
    # reject before trusting payload_len, or a garbage header could make
    # us block on a bogus multi-gigabyte read
    if magic != MAGIC:
        raise DecodeError("magic", f"expected {MAGIC!r}")
    if version != VERSION:
        raise DecodeError("version", f"unknown version {version}")
    if payload_len > 2**31:
        raise DecodeError("payload length mismatch", f"implausible length {payload_len}")
    payload = _read_exact(sock, payload_len) if payload_len else b""
    return decode(header + payload)


class _SocketPort:
    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._lock = threading.Lock()

    def send(self, msg: Message) -> None:
        data = encode(msg)
        with self._lock:
            self._sock.sendall(data)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


class TcpHub(SchedulerHub):
    """Listening scheduler endpoint; one reader thread per worker."""

    def __init__(self, num_workers: int, host: str = "127.0.0.1", port: int = 0):
        super().__init__(capacity=4 * num_workers)
        self.expect(num_workers)
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._ports: list[_SocketPort] = []
        addr = self._listener.getsockname()
        self.endpoint = f"{addr[0]}:{addr[1]}"
        t = threading.Thread(target=self._accept_loop, name="tcp-accept", daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve(self, conn: socket.socket) -> None:
        port = _SocketPort(conn)
        self._ports.append(port)
        worker_id = None
        announced_exit = False  # worker sent Abort, so its EOF is expected
        try:
            first = read_frame(conn)
            received_at = time.monotonic()
            if first.variant is not Variant.HELLO:
                port.close()
                return
            reply = self.register(first.worker_id, port, received_at)
            if reply is not None:
                port.send(reply)
                port.close()
                return
            worker_id = first.worker_id
            while not self._stop.is_set():
                msg = read_frame(conn)
                if msg.variant is Variant.ABORT:
                    announced_exit = True
                self.submit(worker_id, msg)
        except (ConnectionError, OSError, DecodeError):
            # a malformed frame is indistinguishable from a broken peer
            if (
                worker_id is not None
                and not announced_exit
                and not self.terminated
                and self.on_worker_lost
            ):
                self.on_worker_lost(worker_id)

    def close(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        for port in self._ports:
            port.close()


class TcpChannel:
    """Worker endpoint of the TCP backend."""

    def __init__(self, endpoint: str, connect_timeout: float = 10.0):
        host, port_str = endpoint.rsplit(":", 1)
        try:
            self._sock = socket.create_connection((host, int(port_str)), timeout=connect_timeout)
        except OSError as exc:
            raise TransportFailure(f"cannot reach scheduler at {endpoint}: {exc}") from exc
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock.settimeout(None)

    def send(self, msg: Message) -> None:
        try:
            self._sock.sendall(encode(msg))
        except OSError as exc:
            raise TransportFailure(f"send failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> Message:
        self._sock.settimeout(timeout)
        try:
            return read_frame(self._sock)
        except socket.timeout:
            raise TransportFailure("receive timed out") from None
        except (ConnectionError, OSError) as exc:
            raise TransportFailure(f"connection lost: {exc}") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
