"""One-sided PUT/GET fabric between the four party nodes.

An :class:`Endpoint` is a party's network interface: it meters traffic, writes
incoming PUT/TAGS bodies straight into the party's host memory, answers GETs,
and hands TRIGGER/COMPLETION/ABORT messages to whoever owns it.  Bytes move
over one of two transports with the same contract (per-link FIFO delivery):
:class:`SimFabric` on a virtual clock with per-link bandwidth and latency, or
:class:`SocketTransport` over TCP between processes.
"""

from __future__ import annotations

import logging
import math
import queue
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable

from .runtime import SimKernel, WaitFor
from .wire import (HEADER_BYTES, AbortReason, FramingError, MsgType, WireMessage, abort_payload, body_length,
                   build, decode_header, parse_abort)

log = logging.getLogger(__name__)

DATA_TYPES = (MsgType.PUT, MsgType.TAGS)


class FabricError(RuntimeError):
    pass


def min_accels(link_gbps: float, per_accel_gbps: float) -> int:
    """Fewest accelerators whose combined per-link rate reaches ``link_gbps``."""
    if link_gbps <= 0 or per_accel_gbps <= 0:
        raise ValueError("rates must be positive")
    # guard against 100/100 -> 1.0000000000000002 style float noise
    return max(1, math.ceil(round(link_gbps / per_accel_gbps, 9)))


# --- accounting ----------------------------------------------------------------

@dataclass
class LinkCounters:
    messages: int = 0
    payload_bytes: int = 0   # PUT + TAGS bodies
    tag_bytes: int = 0       # TAGS bodies only
    total_bytes: int = 0     # every message, headers included

    def add(self, msg: WireMessage) -> None:
        self.messages += 1
        self.total_bytes += msg.wire_bytes
        if msg.type in DATA_TYPES:
            self.payload_bytes += len(msg.payload)
        if msg.type == MsgType.TAGS:
            self.tag_bytes += len(msg.payload)

    def copy(self) -> "LinkCounters":
        return LinkCounters(self.messages, self.payload_bytes, self.tag_bytes, self.total_bytes)

    def __sub__(self, other: "LinkCounters") -> "LinkCounters":
        return LinkCounters(self.messages - other.messages, self.payload_bytes - other.payload_bytes,
                            self.tag_bytes - other.tag_bytes, self.total_bytes - other.total_bytes)


@dataclass(frozen=True)
class MetricsSnapshot:
    """Counters keyed by directed link ``(src, dst)``."""

    links: dict[tuple[int, int], LinkCounters]
    ops_completed: dict[int, int] = field(default_factory=dict)
    time_us: float = 0.0

    def link(self, src: int, dst: int) -> LinkCounters:
        return self.links.get((src, dst), LinkCounters())

    def egress(self, party: int) -> LinkCounters:
        out = LinkCounters()
        for (s, _), c in self.links.items():
            if s == party:
                out.messages += c.messages
                out.payload_bytes += c.payload_bytes
                out.tag_bytes += c.tag_bytes
                out.total_bytes += c.total_bytes
        return out

    def ingress(self, party: int) -> LinkCounters:
        out = LinkCounters()
        for (_, d), c in self.links.items():
            if d == party:
                out.messages += c.messages
                out.payload_bytes += c.payload_bytes
                out.tag_bytes += c.tag_bytes
                out.total_bytes += c.total_bytes
        return out

    def effective_gbps(self, src: int, dst: int, elapsed_us: float) -> float:
        return self.link(src, dst).payload_bytes * 8 / (elapsed_us * 1e3) if elapsed_us > 0 else 0.0

    def __sub__(self, other: "MetricsSnapshot") -> "MetricsSnapshot":
        keys = set(self.links) | set(other.links)
        return MetricsSnapshot({k: self.link(*k) - other.link(*k) for k in keys},
                               {p: self.ops_completed.get(p, 0) - other.ops_completed.get(p, 0)
                                for p in set(self.ops_completed) | set(other.ops_completed)},
                               self.time_us - other.time_us)


class Metrics:
    def __init__(self, party: int):
        self.party = party
        self.out: dict[int, LinkCounters] = defaultdict(LinkCounters)
        self.inn: dict[int, LinkCounters] = defaultdict(LinkCounters)
        self.ops_completed = 0
        self._lock = threading.Lock()

    def sent(self, msg: WireMessage) -> None:
        with self._lock:
            self.out[msg.dst].add(msg)

    def received(self, msg: WireMessage) -> None:
        with self._lock:
            self.inn[msg.src].add(msg)

    def snapshot(self, time_us: float = 0.0) -> MetricsSnapshot:
        with self._lock:
            links = {(self.party, d): c.copy() for d, c in self.out.items()}
            links.update({(s, self.party): c.copy() for s, c in self.inn.items()})
            return MetricsSnapshot(links, {self.party: self.ops_completed}, time_us)


def combined(endpoints) -> MetricsSnapshot:
    """System-wide counters: each link as seen by its sender."""
    links, ops = {}, {}
    for ep in endpoints:
        with ep.metrics._lock:
            for d, c in ep.metrics.out.items():
                links[(ep.party, d)] = c.copy()
            ops[ep.party] = ep.metrics.ops_completed
    return MetricsSnapshot(links, ops, max((ep.runtime.now() for ep in endpoints), default=0.0))


# --- endpoint ------------------------------------------------------------------

class _PendingGet:
    __slots__ = ("length", "data", "error", "done")

    def __init__(self, length: int):
        self.length = length
        self.data: bytes | None = None
        self.error: str | None = None
        self.done = False


class Endpoint:
    def __init__(self, party: int, memory, runtime):
        self.party = party
        self.memory = memory
        self.runtime = runtime
        self.transport = None
        self.metrics = Metrics(party)
        self.gate = runtime.gate()
        # batch_id -> [(src, type, offset, length)] of data that landed in memory
        self.arrivals: dict[int, list[tuple[int, MsgType, int, int]]] = defaultdict(list)
        self._gets: dict[tuple[int, int, int], deque[_PendingGet]] = defaultdict(deque)
        self.errors: list[tuple[int, AbortReason, int, int]] = []
        self.on_trigger: Callable[[WireMessage], None] | None = None
        self.on_completion: Callable[[WireMessage], None] | None = None
        self.on_abort: Callable[[WireMessage], None] | None = None
        self.get_timeout_us: float | None = None

    # -- sending

    def send(self, msg: WireMessage) -> None:
        if msg.src != self.party:
            raise FabricError(f"endpoint {self.party} cannot send as party {msg.src}")
        if self.transport is None:
            raise FabricError("endpoint is not attached to a transport")
        self.metrics.sent(msg)
        self.transport.send(msg)

    def put(self, dst: int, offset: int, data: bytes, batch_id: int = 0) -> None:
        """One-sided write into ``dst``'s memory; returns on local completion."""
        if dst == self.party:
            self.memory.write(offset, data)
            return
        self.send(WireMessage(MsgType.PUT, self.party, dst, batch_id, offset, bytes(data)))

    def put_tags(self, dst: int, offset: int, tags: bytes, batch_id: int) -> None:
        self.send(WireMessage(MsgType.TAGS, self.party, dst, batch_id, offset, bytes(tags)))

    def abort(self, dst: int, batch_id: int, reason: AbortReason, element: int, offset: int = 0) -> None:
        self.send(WireMessage(MsgType.ABORT, self.party, dst, batch_id, offset, abort_payload(reason, element)))

    def get(self, src: int, offset: int, length: int, batch_id: int = 0, timeout_us: float | None = None):
        """Generator: fetch ``length`` bytes from ``src``'s memory (GET answered by a PUT)."""
        if src == self.party:
            return self.memory.read(offset, length)
        pending = _PendingGet(length)
        with self.gate:
            self._gets[(src, batch_id, offset)].append(pending)
        self.send(WireMessage(MsgType.GET, self.party, src, batch_id, offset, b"", length))
        timeout = timeout_us if timeout_us is not None else self.get_timeout_us
        try:
            yield WaitFor(self.gate, lambda: pending.done, timeout)
        except TimeoutError:
            with self.gate:
                q = self._gets.get((src, batch_id, offset))
                if q and pending in q:
                    q.remove(pending)
            raise FabricError(f"GET {length}B @ {offset} from party {src} timed out") from None
        if pending.error:
            raise FabricError(pending.error)
        return pending.data

    # -- receiving

    def deliver(self, msg: WireMessage) -> None:
        self.metrics.received(msg)
        t = msg.type
        if t in DATA_TYPES:
            self._on_data(msg)
        elif t == MsgType.GET:
            self._on_get(msg)
        elif t == MsgType.ABORT:
            self._on_abort(msg)
        elif t == MsgType.TRIGGER and self.on_trigger:
            self.on_trigger(msg)
        elif t == MsgType.COMPLETION and self.on_completion:
            self.on_completion(msg)

    def _on_data(self, msg: WireMessage) -> None:
        n = len(msg.payload)
        if msg.type == MsgType.PUT:
            with self.gate:
                q = self._gets.get((msg.src, msg.batch_id, msg.offset))
                pending = q.popleft() if q else None
                if q is not None and not q:
                    del self._gets[(msg.src, msg.batch_id, msg.offset)]
                if pending is not None:
                    pending.data, pending.done = msg.payload, True
            if pending is not None:
                self.gate.notify()
                return
        if not self.memory.is_registered(msg.offset, n):
            log.warning("party %d: %s of %d bytes at %d from %d hits unregistered memory",
                        self.party, msg.type.name, n, msg.offset, msg.src)
            self.errors.append((msg.src, AbortReason.BAD_RANGE, msg.batch_id, msg.offset))
            self.abort(msg.src, msg.batch_id, AbortReason.BAD_RANGE, msg.offset, msg.offset)
            return
        self.memory.write(msg.offset, msg.payload)
        with self.gate:
            self.arrivals[msg.batch_id].append((msg.src, msg.type, msg.offset, n))
        self.gate.notify()

    def _on_get(self, msg: WireMessage) -> None:
        if not self.memory.is_registered(msg.offset, msg.length):
            self.abort(msg.src, msg.batch_id, AbortReason.BAD_RANGE, msg.offset, msg.offset)
            return
        self.put(msg.src, msg.offset, self.memory.read(msg.offset, msg.length), msg.batch_id)

    def _on_abort(self, msg: WireMessage) -> None:
        reason, element = parse_abort(msg.payload)
        if reason == AbortReason.BAD_RANGE:
            with self.gate:
                q = self._gets.get((msg.src, msg.batch_id, msg.offset))
                pending = q.popleft() if q else None
                if pending is not None:
                    pending.error = f"party {msg.src} rejected GET @ {msg.offset}: unregistered range"
                    pending.done = True
            if pending is not None:
                self.gate.notify()
                return
        self.errors.append((msg.src, reason, msg.batch_id, element))
        if self.on_abort:
            self.on_abort(msg)

    # -- ingress bookkeeping

    def arrived(self, batch_id: int, mtype: MsgType, lo: int, hi: int) -> int:
        """Bytes of ``mtype`` for ``batch_id`` that landed inside ``[lo, hi)``."""
        return sum(n for _, t, off, n in self.arrivals.get(batch_id, ())
                   if t == mtype and lo <= off and off + n <= hi)

    def forget(self, batch_id: int) -> None:
        with self.gate:
            self.arrivals.pop(batch_id, None)


# --- simulated transport --------------------------------------------------------

@dataclass
class LinkModel:
    bandwidth_gbps: float = 100.0
    latency_us: float = 1.0
    busy_us: float = 0.0
    free_at_us: float = 0.0
    up: bool = True

    def __post_init__(self):
        if self.bandwidth_gbps <= 0 or self.latency_us < 0:
            raise ValueError("link bandwidth must be positive and latency non-negative")

    def serialization_us(self, nbytes: int) -> float:
        return 8 * nbytes / (self.bandwidth_gbps * 1e3)

    def transfer_time_us(self, nbytes: int) -> float:
        return self.latency_us + self.serialization_us(nbytes)

    def schedule(self, now_us: float, nbytes: int) -> float:
        """Reserve the link for one message; returns its arrival time."""
        start = max(now_us, self.free_at_us)
        ser = self.serialization_us(nbytes)
        self.free_at_us = start + ser
        self.busy_us += ser
        return start + ser + self.latency_us


class SimFabric:
    """In-process fabric on a :class:`SimKernel`; bodies cost bandwidth, headers do not."""

    def __init__(self, kernel: SimKernel, bandwidth_gbps: float = 100.0, latency_us: float = 1.0):
        self.kernel = kernel
        self.links = {(s, d): LinkModel(bandwidth_gbps, latency_us) for s in range(4) for d in range(4) if s != d}
        self.endpoints: dict[int, Endpoint] = {}

    def attach(self, endpoint: Endpoint) -> None:
        if endpoint.party in self.endpoints:
            raise FabricError(f"party {endpoint.party} is already attached")
        self.endpoints[endpoint.party] = endpoint
        endpoint.transport = self

    def send(self, msg: WireMessage) -> None:
        link = self.links[(msg.src, msg.dst)]
        tag = f"{msg.type.name} {msg.src}->{msg.dst} b{msg.batch_id} @{msg.offset} {msg.payload_len}B"
        self.kernel.record("send " + tag)
        if not link.up:
            return
        arrival = link.schedule(self.kernel.now(), len(msg.payload))
        dst = self.endpoints[msg.dst]

        def land():
            self.kernel.record("recv " + tag)
            dst.deliver(msg)
        self.kernel.call_at(arrival, land)


# --- sockets ----------------------------------------------------------------------

_PREAMBLE = struct.Struct("<4sB")
_PREAMBLE_MAGIC = b"COPA"


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if not k:
            raise ConnectionError("peer closed the connection")
        got += k
    return bytes(buf)


class SocketTransport:
    """One TCP stream per unordered party pair.

    Every party listens on its own endpoint; party ``i`` dials each ``j < i``
    and accepts the rest, so no two parties race to connect the same pair.
    Outbound messages go through one writer thread per peer, which keeps
    per-link FIFO order and means a receive handler never blocks on a send.
    """

    def __init__(self, party: int, peers: list[tuple[str, int]], endpoint: Endpoint):
        self.party = party
        self.peers = peers
        self.endpoint = endpoint
        endpoint.transport = self
        self.socks: dict[int, socket.socket] = {}
        self._outq: dict[int, queue.SimpleQueue] = {}
        self._listener: socket.socket | None = None
        self._closed = threading.Event()
        self._threads: list[threading.Thread] = []

    def listen(self) -> None:
        host, port = self.peers[self.party]
        ls = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        ls.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        ls.bind((host, port))
        ls.listen(8)
        self._listener = ls

    def connect(self, timeout_s: float = 30.0) -> None:
        if self._listener is None:
            self.listen()
        deadline = time.monotonic() + timeout_s
        for j in range(self.party):
            self.socks[j] = self._dial(j, deadline)
        self._listener.settimeout(max(0.1, deadline - time.monotonic()))
        while len(self.socks) < len(self.peers) - 1:
            try:
                s, _ = self._listener.accept()
            except socket.timeout:
                raise FabricError(f"party {self.party}: peers {self._missing()} never connected") from None
            s.settimeout(max(0.1, deadline - time.monotonic()))
            magic, j = _PREAMBLE.unpack(_recv_exact(s, _PREAMBLE.size))
            if magic != _PREAMBLE_MAGIC or j <= self.party or j >= len(self.peers) or j in self.socks:
                s.close()
                raise FabricError(f"party {self.party}: unexpected connection preamble from party {j}")
            s.settimeout(None)
            self.socks[j] = s
        for j, s in self.socks.items():
            s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._outq[j] = queue.SimpleQueue()
            for target, name in ((self._reader, "rx"), (self._writer, "tx")):
                th = threading.Thread(target=target, args=(j,), name=f"p{self.party}-{name}{j}", daemon=True)
                th.start()
                self._threads.append(th)

    def _missing(self):
        return [j for j in range(len(self.peers)) if j != self.party and j not in self.socks]

    def _dial(self, j: int, deadline: float) -> socket.socket:
        while True:
            try:
                s = socket.create_connection(self.peers[j], timeout=max(0.1, deadline - time.monotonic()))
                s.sendall(_PREAMBLE.pack(_PREAMBLE_MAGIC, self.party))
                s.settimeout(None)
                return s
            except OSError:
                if time.monotonic() > deadline:
                    raise FabricError(f"party {self.party}: cannot reach party {j} at {self.peers[j]}") from None
                time.sleep(0.05)

    def send(self, msg: WireMessage) -> None:
        q = self._outq.get(msg.dst)
        if q is None:
            raise FabricError(f"party {self.party}: no link to party {msg.dst}")
        q.put(msg.encode())

    def _writer(self, j: int) -> None:
        s, q = self.socks[j], self._outq[j]
        while True:
            data = q.get()
            if data is None:
                return
            try:
                s.sendall(data)
            except OSError:
                if not self._closed.is_set():
                    log.error("party %d: link to %d failed", self.party, j)
                return

    def _reader(self, j: int) -> None:
        s = self.socks[j]
        try:
            while True:
                hdr = _recv_exact(s, HEADER_BYTES)
                mtype, src, dst, batch_id, offset, plen = decode_header(hdr)
                if src != j or dst != self.party:
                    raise FramingError(f"misrouted frame {src}->{dst} on link {j}->{self.party}")
                body = _recv_exact(s, body_length(mtype, plen)) if body_length(mtype, plen) else b""
                self.endpoint.deliver(build(mtype, src, dst, batch_id, offset, plen, body))
        except (ConnectionError, OSError):
            if not self._closed.is_set():
                log.info("party %d: link from %d closed", self.party, j)
        except FramingError:
            log.exception("party %d: framing error on link from %d", self.party, j)

    def close(self) -> None:
        self._closed.set()
        for q in self._outq.values():
            q.put(None)
        for s in self.socks.values():
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            s.close()
        if self._listener:
            self._listener.close()
