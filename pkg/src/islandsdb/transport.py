"""Inter-instance messages and channels.

Wire format (see docs/wire_format.md): each frame is a 4-byte little-endian
length followed by the message fields in declaration order.
"""
from __future__ import annotations

import collections
import enum
import heapq
import logging
import os
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Any

log = logging.getLogger(__name__)


class MsgKind(enum.IntEnum):
    EXEC_BRANCH = 0
    BRANCH_RESULT = 1
    PREPARE = 2
    VOTE = 3
    DECISION = 4
    ACK = 5


class Op(enum.IntEnum):
    READ = 0
    UPDATE = 1


class VoteValue(enum.IntEnum):
    NO = 0
    YES = 1
    YES_READ_ONLY = 2


class DecisionValue(enum.IntEnum):
    ABORT = 0
    COMMIT = 1
    # participant asking the coordinator for the outcome of an in-doubt branch
    QUERY = 2


@dataclass(frozen=True)
class ExecBranch:
    op: Op
    keys: tuple[int, ...]
    # update transform tag; 0 for reads
    tag: int = 0


@dataclass(frozen=True)
class BranchResult:
    ok: bool
    rows: tuple[tuple[int, bytes], ...] = ()


@dataclass(frozen=True)
class Message:
    kind: MsgKind
    global_txn_id: int
    origin: int
    destination: int
    body: Any = None

    def __post_init__(self):
        expected = _BODY_TYPES[self.kind]
        if not isinstance(self.body, expected):
            raise TypeError(f"{self.kind.name} needs a {expected} body, "
                            f"got {type(self.body).__name__}")


_BODY_TYPES = {
    MsgKind.EXEC_BRANCH: ExecBranch,
    MsgKind.BRANCH_RESULT: BranchResult,
    MsgKind.PREPARE: type(None),
    MsgKind.VOTE: VoteValue,
    MsgKind.DECISION: DecisionValue,
    MsgKind.ACK: DecisionValue,
}


class ChannelClosed(Exception):
    pass


class FrameError(ValueError):
    pass


_HEADER = struct.Struct("<BQII")
_LEN = struct.Struct("<I")


def encode(m: Message) -> bytes:
    parts = [_HEADER.pack(m.kind, m.global_txn_id, m.origin, m.destination)]
    b = m.body
    if m.kind is MsgKind.EXEC_BRANCH:
        parts.append(struct.pack("<BQI", b.op, b.tag, len(b.keys)))
        parts.append(struct.pack(f"<{len(b.keys)}Q", *b.keys))
    elif m.kind is MsgKind.BRANCH_RESULT:
        parts.append(struct.pack("<BI", b.ok, len(b.rows)))
        for key, payload in b.rows:
            parts.append(struct.pack("<QI", key, len(payload)))
            parts.append(payload)
    elif m.kind is not MsgKind.PREPARE:
        parts.append(struct.pack("<B", b))
    payload = b"".join(parts)
    return _LEN.pack(len(payload)) + payload


def decode(frame: bytes) -> Message:
    """Decode one complete frame (length prefix included)."""
    if len(frame) < _LEN.size:
        raise FrameError("short frame")
    (n,) = _LEN.unpack_from(frame)
    if len(frame) != n + _LEN.size:
        raise FrameError(f"frame length {len(frame) - 4} != declared {n}")
    try:
        return _decode_payload(frame)
    except (ValueError, struct.error) as exc:
        if isinstance(exc, FrameError):
            raise
        raise FrameError(str(exc)) from exc


def _decode_payload(frame: bytes) -> Message:
    off = _LEN.size
    kind, gtid, origin, dest = _HEADER.unpack_from(frame, off)
    off += _HEADER.size
    kind = MsgKind(kind)
    if kind is MsgKind.EXEC_BRANCH:
        op, tag, count = struct.unpack_from("<BQI", frame, off)
        off += 13
        keys = struct.unpack_from(f"<{count}Q", frame, off)
        off += 8 * count
        body = ExecBranch(Op(op), tuple(keys), tag)
    elif kind is MsgKind.BRANCH_RESULT:
        ok, count = struct.unpack_from("<BI", frame, off)
        off += 5
        rows = []
        for _ in range(count):
            key, size = struct.unpack_from("<QI", frame, off)
            off += 12
            rows.append((key, bytes(frame[off:off + size])))
            off += size
        body = BranchResult(bool(ok), tuple(rows))
    elif kind is MsgKind.PREPARE:
        body = None
    else:
        (v,) = struct.unpack_from("<B", frame, off)
        off += 1
        body = VoteValue(v) if kind is MsgKind.VOTE else DecisionValue(v)
    if off != len(frame):
        raise FrameError("trailing bytes in frame")
    return Message(kind, gtid, origin, dest, body)


class InProcessChannel:
    """Bounded FIFO between two execution units of one process."""

    def __init__(self, capacity: int = 1024):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self.closed = False
        self.sent = 0
        self.received = 0
        self._lock = threading.Lock()

    def send(self, m: Message) -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        self._q.put(m)
        with self._lock:
            self.sent += 1

    def recv(self, timeout: float | None = None) -> Message | None:
        """Next message, or None once ``timeout`` seconds pass."""
        try:
            m = self._q.get(timeout=timeout) if timeout != 0 else self._q.get_nowait()
        except queue.Empty:
            return None
        with self._lock:
            self.received += 1
        return m

    def pending(self) -> int:
        return self._q.qsize()

    def close(self) -> None:
        self.closed = True


class DomainSocketChannel:
    """Length-prefixed frames over a connected Unix stream socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.closed = False
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        self.sent = 0
        self.received = 0

    @classmethod
    def pair(cls) -> tuple["DomainSocketChannel", "DomainSocketChannel"]:
        a, b = socket.socketpair(socket.AF_UNIX, socket.SOCK_STREAM)
        return cls(a), cls(b)

    def send(self, m: Message) -> None:
        self.send_frame(encode(m))

    def send_frame(self, frame: bytes) -> None:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        with self._send_lock:
            self.sock.sendall(frame)
            self.sent += 1

    def recv_frame(self, timeout: float | None = None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if len(self._buf) >= 4:
                (n,) = _LEN.unpack_from(self._buf)
                if len(self._buf) >= n + 4:
                    frame = bytes(self._buf[:n + 4])
                    del self._buf[:n + 4]
                    self.received += 1
                    return frame
            if deadline is not None:
                left = deadline - time.monotonic()
                if left <= 0:
                    return None
                self.sock.settimeout(left)
            else:
                self.sock.settimeout(None)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                return None
            if not chunk:
                raise ChannelClosed("peer closed")
            self._buf += chunk

    def recv(self, timeout: float | None = None) -> Message | None:
        frame = self.recv_frame(timeout)
        return None if frame is None else decode(frame)

    def close(self) -> None:
        self.closed = True
        self.sock.close()


@dataclass(order=True)
class _Pending:
    deliver_at: int
    seq: int
    msg: Message = field(compare=False)


class SimChannel:
    """Logical-time FIFO channel used in Simulated mode.

    A message sent at time ``t`` becomes visible at ``t + latency_ns`` but
    never before an earlier message on the same channel.
    """

    def __init__(self, latency_ns: int, capacity: int = 1024):
        self.latency_ns = latency_ns
        self.capacity = capacity
        self.closed = False
        self._heap: list[_Pending] = []
        self._seq = 0
        self._last = 0
        self.sent = 0
        self.received = 0

    def send(self, m: Message, now: int, extra_delay: int = 0) -> int:
        if self.closed:
            raise ChannelClosed("send on closed channel")
        at = max(now + self.latency_ns + extra_delay, self._last)
        self._last = at
        self._seq += 1
        heapq.heappush(self._heap, _Pending(at, self._seq, m))
        self.sent += 1
        return at

    def recv(self, now: int) -> Message | None:
        if self._heap and self._heap[0].deliver_at <= now:
            self.received += 1
            return heapq.heappop(self._heap).msg
        return None

    def next_delivery(self) -> int | None:
        return self._heap[0].deliver_at if self._heap else None

    def pending(self) -> int:
        return len(self._heap)

    def close(self) -> None:
        self.closed = True


class IpcMechanism(enum.Enum):
    IN_PROCESS = "in-process"
    DOMAIN_SOCKET = "domain-socket"


def measure_ipc(mechanism: IpcMechanism, same_socket: bool = True,
                duration: float = 1.0, cores: tuple[int, int] | None = None
                ) -> float:
    """Round trips per second between two echo threads.

    ``cores`` pins the two threads when the platform allows it; callers pick
    same- or cross-socket core pairs. ``same_socket`` is informational when
    no cores are given.
    """
    if duration <= 0:
        return 0.0
    ping = Message(MsgKind.VOTE, 1, 0, 1, VoteValue.YES)
    stop = threading.Event()

    if mechanism is IpcMechanism.IN_PROCESS:
        a2b, b2a = InProcessChannel(), InProcessChannel()
        tx, rx = a2b.send, b2a.recv

        def echo():
            _pin(cores[1] if cores else None)
            while not stop.is_set():
                m = a2b.recv(timeout=0.05)
                if m is not None:
                    b2a.send(m)
    else:
        try:
            left, right = DomainSocketChannel.pair()
        except (AttributeError, OSError) as exc:
            log.warning("domain sockets unavailable: %s", exc)
            return float("nan")
        frame = encode(ping)

        def tx(_m):
            left.send_frame(frame)

        def rx(timeout=None):
            return left.recv_frame(timeout)

        def echo():
            _pin(cores[1] if cores else None)
            while not stop.is_set():
                try:
                    f = right.recv_frame(timeout=0.05)
                except (ChannelClosed, OSError):
                    return
                if f is not None:
                    right.send_frame(f)

    t = threading.Thread(target=echo, daemon=True)
    t.start()
    saved = os.sched_getaffinity(0) if hasattr(os, "sched_getaffinity") else None
    _pin(cores[0] if cores else None)
    n = 0
    end = time.perf_counter() + duration
    while time.perf_counter() < end:
        tx(ping)
        if rx(timeout=1.0) is None:
            break
        n += 1
    stop.set()
    t.join(timeout=1.0)
    if saved is not None and cores:
        os.sched_setaffinity(0, saved)
    if mechanism is IpcMechanism.DOMAIN_SOCKET:
        left.close()
        right.close()
    return n / duration


def _pin(core: int | None) -> None:
    if core is None or not hasattr(os, "sched_setaffinity"):
        return
    try:
        os.sched_setaffinity(0, {core})
    except OSError as exc:
        log.warning("could not pin to core %d: %s", core, exc)



class Trace:
    """Counts messages per (global txn, kind) for audits."""

    def __init__(self):
        self.by_txn: dict[int, collections.Counter] = collections.defaultdict(
            collections.Counter)
        self.events: list[tuple[int, str, int, int, MsgKind]] = []
        self.enabled = True

    def record(self, now: int, what: str, m: Message) -> None:
        if not self.enabled:
            return
        if what == "send":
            self.by_txn[m.global_txn_id][m.kind] += 1
        self.events.append((now, what, m.global_txn_id, m.origin, m.kind))

    def count(self, gtid: int) -> int:
        return sum(self.by_txn[gtid].values())
