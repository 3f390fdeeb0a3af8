"""Behavioral model of the lookaside accelerator path.

The host writes share records into :class:`HostMemoryRegion` and queues
48-byte :class:`LookasideCommand` records.  A control unit hands the head of
the queue to the first idle accelerator instance, provided the command's
memory ranges do not conflict with anything still running.  Each instance
stages its operands (Data A / Data B), charges modeled time from
:class:`AccelCostModel`, and talks to the fabric directly: remote sources are
fetched with GET, egress terms and tags go out as PUT/TAGS, and remote
destinations receive results by PUT.

Share records are the holder's three slots in ascending slot order, 48 bytes
per element.  Per-batch scratch (egress staging, ingress, tags) lives at
offsets given by :class:`RegionMap`, so peers can PUT into each other without
negotiating addresses.
"""

from __future__ import annotations

import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import count as _counter

from .protocol import (LINK_HASH_BYTES, ROLES, TAG_BYTES, Mode, VerificationError, add_batch,
                       ingress_position, link_hasher, pack_triples, sender_terms, stage1_batch,
                       stage2_batch, tags_for, triples, verifier_terms)
from .ring import ELEMENT_BYTES, KeyMaterial, pack, unpack
from .runtime import Sleep, WaitFor
from .wire import MsgType

log = logging.getLogger(__name__)

RECORD_BYTES = 3 * ELEMENT_BYTES
DEFAULT_MEMORY = 64 << 20


class Opcode(IntEnum):
    ADD = 0x01
    MUL_STAGE1 = 0x02
    MUL_STAGE2 = 0x03
    MUL_FUSED = 0x04


class Status(IntEnum):
    OK = 0
    ABORT = 1
    ERROR = 2
    ACCEPTED = 3


class CommandError(ValueError):
    """Malformed or out-of-bounds command; nothing is enqueued."""


class BatchAborted(RuntimeError):
    def __init__(self, batch_id: int, element: int | None = None, term=None, reason: str = ""):
        self.batch_id, self.element, self.term = batch_id, element, term
        super().__init__(reason or f"batch {batch_id} aborted")


_CMD = struct.Struct("<BBBBIQQQQQ")


@dataclass(frozen=True)
class LookasideCommand:
    opcode: Opcode
    flags: int
    src_party: int
    dst_party: int
    count: int
    batch_id: int
    src_a: int
    src_b: int
    dst: int
    ctr_base: int = 0

    @property
    def mode(self) -> Mode:
        return Mode(self.flags & 0x07)

    def pack(self) -> bytes:
        return _CMD.pack(self.opcode, self.flags, self.src_party, self.dst_party, self.count,
                         self.batch_id, self.src_a, self.src_b, self.dst, self.ctr_base)

    @classmethod
    def unpack(cls, data: bytes) -> "LookasideCommand":
        if len(data) != _CMD.size:
            raise CommandError(f"command record must be {_CMD.size} bytes, got {len(data)}")
        op, flags, sp, dp, n, batch, a, b, dst, ctr = _CMD.unpack(data)
        try:
            op = Opcode(op)
        except ValueError:
            raise CommandError(f"unknown opcode {op:#04x}") from None
        return cls(op, flags, sp, dp, n, batch, a, b, dst, ctr)


assert _CMD.size == 48


@dataclass(frozen=True)
class AccelCostModel:
    clock_mhz: float = 275.0
    cycles_per_element: float = 2.0
    dma_startup_us: float = 1.0

    def __post_init__(self):
        if min(self.clock_mhz, self.cycles_per_element, self.dma_startup_us) <= 0:
            raise ValueError("cost model parameters must be strictly positive")

    def compute_us(self, count: int) -> float:
        return count * self.cycles_per_element / self.clock_mhz

    def job_time_us(self, count: int) -> float:
        return self.dma_startup_us + self.compute_us(count)

    def ops_per_s(self, count: int) -> float:
        return count / self.job_time_us(count) * 1e6

    @property
    def peak_ops_per_s(self) -> float:
        return self.clock_mhz * 1e6 / self.cycles_per_element


def per_link_rate(model: AccelCostModel, malicious: bool = False) -> float:
    """Gb/s one accelerator offers each directed link: one term (+ tag) per element."""
    bits = 8 * (ELEMENT_BYTES + (TAG_BYTES if malicious else 0))
    return bits * model.clock_mhz * 1e6 / model.cycles_per_element / 1e9


class HostMemoryRegion:
    def __init__(self, size: int = DEFAULT_MEMORY):
        if size <= 0:
            raise ValueError("memory size must be positive")
        self.size = size
        self.buf = bytearray(size)
        self.registered: list[tuple[int, int, str]] = []

    def in_bounds(self, offset: int, length: int) -> bool:
        return 0 <= offset and length >= 0 and offset + length <= self.size

    def register(self, offset: int, length: int, name: str = "") -> None:
        if not self.in_bounds(offset, length):
            raise CommandError(f"cannot register [{offset}, {offset + length}) in a {self.size}-byte region")
        self.registered.append((offset, offset + length, name))

    def is_registered(self, offset: int, length: int) -> bool:
        return any(lo <= offset and offset + length <= hi for lo, hi, _ in self.registered)

    def read(self, offset: int, length: int) -> bytes:
        if not self.in_bounds(offset, length):
            raise CommandError(f"read [{offset}, {offset + length}) outside region")
        return bytes(self.buf[offset:offset + length])

    def write(self, offset: int, data: bytes) -> None:
        if not self.in_bounds(offset, len(data)):
            raise CommandError(f"write [{offset}, {offset + len(data)}) outside region")
        self.buf[offset:offset + len(data)] = data


class RegionMap:
    """Fixed carve-up of host memory into ``slots`` batch slots.

    Batch ``b`` uses slot ``b % slots``.  Inside a slot of capacity ``C``
    elements, each area is sized for ``C`` and laid out as::

        input_a | input_b | intermediate | egress | ingress | output  (48C each)
        tags_out | tags_in                                           (24C each)

    Egress, ingress and tag areas are split into three planes, one per link,
    each ``count`` entries long, so every link's traffic is one contiguous PUT.
    """

    PER_ELEMENT = 6 * RECORD_BYTES + 2 * 3 * TAG_BYTES

    def __init__(self, memory_size: int = DEFAULT_MEMORY, slots: int = 4):
        if slots < 1:
            raise ValueError("need at least one batch slot")
        self.memory_size = memory_size
        self.slots = slots
        self.slot_bytes = memory_size // slots
        self.capacity = self.slot_bytes // self.PER_ELEMENT
        if self.capacity < 4:
            raise ValueError("memory too small for the region map")

    def _base(self, batch_id: int) -> int:
        return (batch_id % self.slots) * self.slot_bytes

    def check(self, count: int) -> None:
        if count > self.capacity:
            raise CommandError(f"batch of {count} exceeds slot capacity {self.capacity}")

    def input_a(self, batch_id: int) -> int:
        return self._base(batch_id)

    def input_b(self, batch_id: int) -> int:
        return self._base(batch_id) + RECORD_BYTES * self.capacity

    def intermediate(self, batch_id: int) -> int:
        return self._base(batch_id) + 2 * RECORD_BYTES * self.capacity

    def egress(self, batch_id: int) -> int:
        return self._base(batch_id) + 3 * RECORD_BYTES * self.capacity

    def ingress(self, batch_id: int) -> int:
        return self._base(batch_id) + 4 * RECORD_BYTES * self.capacity

    def output(self, batch_id: int) -> int:
        return self._base(batch_id) + 5 * RECORD_BYTES * self.capacity

    def tags_out(self, batch_id: int) -> int:
        return self._base(batch_id) + 6 * RECORD_BYTES * self.capacity

    def tags_in(self, batch_id: int) -> int:
        return self.tags_out(batch_id) + 3 * TAG_BYTES * self.capacity

    @staticmethod
    def plane(base: int, index: int, count: int, width: int = ELEMENT_BYTES) -> int:
        return base + index * count * width

    @staticmethod
    def tag_plane(base: int, index: int, count: int, mode: Mode) -> int:
        if mode & Mode.BATCHED_HASH:
            return base + index * LINK_HASH_BYTES
        return base + index * count * TAG_BYTES

    def register_all(self, memory: HostMemoryRegion) -> None:
        for s in range(self.slots):
            memory.register(s * self.slot_bytes, self.PER_ELEMENT * self.capacity, f"slot{s}")


@dataclass
class CompletionEvent:
    ticket: int
    batch_id: int
    opcode: Opcode
    status: Status
    simulated_time_us: float
    compute_us: float = 0.0
    counters: dict = field(default_factory=dict)
    instance: int = -1
    start_us: float = 0.0
    end_us: float = 0.0
    element: int | None = None
    term: tuple[int, int] | None = None
    error: str | None = None


@dataclass
class _Job:
    ticket: int
    cmd: LookasideCommand
    origin: object = None
    reads: list = field(default_factory=list)
    writes: list = field(default_factory=list)


@dataclass
class AcceleratorInstance:
    index: int
    job: _Job | None = None
    data_a: bytes = b""
    data_b: bytes = b""
    jobs_run: int = 0


def _overlaps(r1, r2) -> bool:
    return r1[0] < r2[1] and r2[0] < r1[1]


class Engine:
    def __init__(self, party: int, memory: HostMemoryRegion, runtime, endpoint=None,
                 keys: KeyMaterial | None = None, num_accels: int = 1, cost: AccelCostModel | None = None,
                 region_map: RegionMap | None = None, stream_chunk: int = 4096,
                 ingress_timeout_us: float | None = None):
        if num_accels < 1:
            raise ValueError("need at least one accelerator instance")
        self.party = party
        self.memory = memory
        self.runtime = runtime
        self.endpoint = endpoint
        self.keys = keys
        self.cost = cost or AccelCostModel()
        self.regions = region_map or RegionMap(memory.size)
        self.stream_chunk = max(1, stream_chunk)
        self.ingress_timeout_us = ingress_timeout_us
        self.instances = [AcceleratorInstance(i) for i in range(num_accels)]
        self.queue: deque[_Job] = deque()
        self.events: dict[int, CompletionEvent] = {}
        self.trace: list[tuple[str, int, int, float]] = []   # (start|end, ticket, instance, time)
        self.poisoned: dict[int, int | None] = {}   # batch_id -> first failing element
        self.listeners: list = []
        self.gate = runtime.gate()
        self._tickets = _counter(1)
        self._control = runtime.spawn(self._control_unit(), name=f"p{party}-control")

    # -- host-facing API

    def submit(self, cmd: LookasideCommand, origin=None) -> int:
        jobs = self._validate(cmd)
        with self.gate:
            ticket = next(self._tickets)
            self.queue.append(_Job(ticket, cmd, origin, *jobs))
        self.runtime.record(f"p{self.party} submit t{ticket} {cmd.opcode.name} b{cmd.batch_id} n{cmd.count}")
        self.gate.notify()
        return ticket

    def completion(self, ticket: int, timeout_us: float | None = None):
        """Generator form of :meth:`wait`."""
        yield WaitFor(self.gate, lambda: ticket in self.events, timeout_us)
        return self.events[ticket]

    def wait(self, ticket: int, timeout: float | None = None) -> CompletionEvent:
        task = self.runtime.spawn(self.completion(ticket), name=f"p{self.party}-wait{ticket}")
        return self.runtime.wait(task, timeout)

    @property
    def idle(self) -> bool:
        return not self.queue and all(inst.job is None for inst in self.instances)

    # -- validation and ranges

    def _validate(self, cmd: LookasideCommand):
        if not isinstance(cmd.opcode, Opcode):
            raise CommandError(f"unknown opcode {cmd.opcode!r}")
        if cmd.count < 1:
            raise CommandError("count must be at least 1")
        if cmd.src_party > 3 or cmd.dst_party > 3:
            raise CommandError("party index out of range")
        mode = cmd.mode
        if cmd.opcode != Opcode.ADD and self.keys is None:
            raise CommandError("multiplication needs key material")
        n, span = cmd.count, cmd.count * RECORD_BYTES
        reads, writes = [], []
        remote_src = cmd.src_party != self.party
        for off in (cmd.src_a, cmd.src_b):
            if not remote_src:
                reads.append(self._range(off, span))
        if cmd.dst_party == self.party:
            writes.append(self._range(cmd.dst, span))
        rm = self.regions
        if cmd.opcode in (Opcode.MUL_STAGE1, Opcode.MUL_FUSED, Opcode.MUL_STAGE2):
            rm.check(n)
        tag_span = 3 * LINK_HASH_BYTES if mode & Mode.BATCHED_HASH else 3 * TAG_BYTES * n
        if cmd.opcode == Opcode.MUL_STAGE1:
            writes.append(self._range(rm.egress(cmd.batch_id), span))
            if mode & Mode.MALICIOUS:
                writes.append(self._range(rm.tags_out(cmd.batch_id), tag_span))
        elif cmd.opcode in (Opcode.MUL_STAGE2, Opcode.MUL_FUSED):
            if mode & Mode.MALICIOUS:
                reads.append(self._range(rm.tags_in(cmd.batch_id), tag_span))
            if cmd.opcode == Opcode.MUL_FUSED:
                reads.append(self._range(rm.ingress(cmd.batch_id), span))
        return reads, writes

    def _range(self, off: int, length: int) -> tuple[int, int]:
        if not self.memory.in_bounds(off, length):
            raise CommandError(f"range [{off}, {off + length}) outside the {self.memory.size}-byte host region")
        return off, off + length

    def _conflicts(self, job: _Job) -> bool:
        for inst in self.instances:
            other = inst.job
            if other is None:
                continue
            for w in job.writes:
                if any(_overlaps(w, r) for r in other.reads + other.writes):
                    return True
            for w in other.writes:
                if any(_overlaps(w, r) for r in job.reads):
                    return True
        return False

    # -- control unit

    def _dispatchable(self) -> bool:
        return bool(self.queue) and any(i.job is None for i in self.instances) and not self._conflicts(self.queue[0])

    def _control_unit(self):
        while True:
            yield WaitFor(self.gate, self._dispatchable)
            with self.gate:
                if not self._dispatchable():
                    continue
                job = self.queue.popleft()
                inst = next(i for i in self.instances if i.job is None)
                inst.job = job
                self.trace.append(("start", job.ticket, inst.index, self.runtime.now()))
            self.runtime.spawn(self._run(job, inst), name=f"p{self.party}-acc{inst.index}-t{job.ticket}")

    def _run(self, job: _Job, inst: AcceleratorInstance):
        cmd = job.cmd
        start = self.runtime.now()
        before = self.endpoint.metrics.snapshot() if self.endpoint else None
        ev = CompletionEvent(job.ticket, cmd.batch_id, cmd.opcode, Status.OK, 0.0, instance=inst.index,
                             start_us=start)
        self.runtime.record(f"p{self.party} start t{job.ticket} acc{inst.index}")
        try:
            if cmd.batch_id in self.poisoned and cmd.opcode != Opcode.ADD:
                raise BatchAborted(cmd.batch_id, self.poisoned[cmd.batch_id],
                                   reason=f"batch {cmd.batch_id} was aborted earlier")
            runner = {Opcode.ADD: self._exec_add, Opcode.MUL_STAGE1: self._exec_stage1,
                      Opcode.MUL_STAGE2: self._exec_stage2, Opcode.MUL_FUSED: self._exec_mul_fused}[cmd.opcode]
            ev.compute_us = yield from runner(cmd, inst)
        except VerificationError as err:
            ev.status, ev.element, ev.term, ev.error = Status.ABORT, err.element, err.term, str(err)
            self.poisoned.setdefault(cmd.batch_id, err.element)
        except BatchAborted as err:
            ev.status, ev.element, ev.error = Status.ABORT, err.element, str(err)
        except Exception as err:  # noqa: BLE001 - every failure becomes a completion event
            log.debug("party %d ticket %d failed", self.party, job.ticket, exc_info=True)
            ev.status, ev.error = Status.ERROR, f"{type(err).__name__}: {err}"
        finally:
            if cmd.opcode == Opcode.MUL_FUSED and self.endpoint:
                self.endpoint.forget(cmd.batch_id)
        ev.end_us = self.runtime.now()
        ev.simulated_time_us = ev.end_us - start
        if before is not None:
            d = self.endpoint.metrics.snapshot() - before
            ev.counters = {"payload_out": d.egress(self.party).payload_bytes,
                           "payload_in": d.ingress(self.party).payload_bytes}
        with self.gate:
            inst.job = None
            inst.jobs_run += 1
            self.events[job.ticket] = ev
            self.trace.append(("end", job.ticket, inst.index, ev.end_us))
            if ev.status == Status.OK and self.endpoint:
                self.endpoint.metrics.ops_completed += cmd.count
        self.runtime.record(f"p{self.party} done t{job.ticket} {ev.status.name}")
        self.gate.notify()
        for fn in self.listeners:
            fn(job, ev)

    # -- data movement

    def _load(self, cmd: LookasideCommand, offset: int, length: int):
        if cmd.src_party == self.party:
            return self.memory.read(offset, length)
        if self.endpoint is None:
            raise CommandError("remote source without a fabric")
        data = yield from self.endpoint.get(cmd.src_party, offset, length, cmd.batch_id)
        return data

    def _store(self, cmd: LookasideCommand, data: bytes) -> None:
        if cmd.dst_party == self.party:
            self.memory.write(cmd.dst, data)
        elif self.endpoint is None:
            raise CommandError("remote destination without a fabric")
        else:
            self.endpoint.put(cmd.dst_party, cmd.dst, data, cmd.batch_id)

    def _stage_inputs(self, cmd, inst):
        span = cmd.count * RECORD_BYTES
        inst.data_a = yield from self._load(cmd, cmd.src_a, span)
        inst.data_b = yield from self._load(cmd, cmd.src_b, span)

    # -- opcodes

    def _exec_add(self, cmd: LookasideCommand, inst: AcceleratorInstance):
        yield from self._stage_inputs(cmd, inst)
        t = self.cost.job_time_us(cmd.count)
        yield Sleep(t)
        self._store(cmd, pack_triples(add_batch(triples(inst.data_a), triples(inst.data_b))))
        return t

    def _exec_stage1(self, cmd: LookasideCommand, inst: AcceleratorInstance):
        yield from self._stage_inputs(cmd, inst)
        t = self.cost.job_time_us(cmd.count)
        yield Sleep(t)
        n, mode = cmd.count, cmd.mode
        out = stage1_batch(self.party, triples(inst.data_a), triples(inst.data_b), self.keys, cmd.ctr_base, 0, mode)
        inst.data_b = pack_triples(out.local_acc)
        self._store(cmd, inst.data_b)
        eg = self.regions.egress(cmd.batch_id)
        for i, term in enumerate(sender_terms(self.party)):
            self.memory.write(RegionMap.plane(eg, i, n), pack(out.egress[term]))
        if mode & Mode.MALICIOUS:
            tb = self.regions.tags_out(cmd.batch_id)
            for i, term in enumerate(verifier_terms(self.party)):
                self.memory.write(RegionMap.tag_plane(tb, i, n, mode),
                                  self._tag_bytes(out.verified[term], cmd.batch_id, term, mode))
        return t

    def _tag_bytes(self, payloads, batch_id, term, mode, first=0) -> bytes:
        if mode & Mode.BATCHED_HASH:
            h = link_hasher(batch_id, *term)
            h.update(pack(payloads))
            return h.digest()
        return tags_for(payloads, batch_id, first, *term)

    def _exec_stage2(self, cmd: LookasideCommand, inst: AcceleratorInstance):
        n = cmd.count
        yield from self._stage_inputs(cmd, inst)   # Data A: intermediates, Data B: ingress planes
        t = self.cost.job_time_us(n)
        yield Sleep(t)
        z = self._finish(cmd, triples(inst.data_a), inst.data_b)
        self._store(cmd, pack_triples(z))
        return t

    def _finish(self, cmd, local, ingress_bytes):
        n, mode = cmd.count, cmd.mode
        vals = unpack(ingress_bytes)
        planes = [vals[i * n:(i + 1) * n] for i in range(3)]
        tags = None
        if mode & Mode.MALICIOUS:
            tb = self.regions.tags_in(cmd.batch_id)
            width = LINK_HASH_BYTES if mode & Mode.BATCHED_HASH else n * TAG_BYTES
            tags = [self.memory.read(RegionMap.tag_plane(tb, i, n, mode), width) for i in range(3)]
        return stage2_batch(self.party, local, planes, self.keys, cmd.ctr_base, 0, mode, cmd.batch_id, tags)

    def _exec_mul_fused(self, cmd: LookasideCommand, inst: AcceleratorInstance):
        """Stage 1 streamed in chunks with egress PUTs, one exchange, then stage 2."""
        n, mode, batch = cmd.count, cmd.mode, cmd.batch_id
        if self.endpoint is None:
            raise CommandError("fused multiply needs a fabric endpoint")
        yield from self._stage_inputs(cmd, inst)
        xs, ys = triples(inst.data_a), triples(inst.data_b)
        rm = self.regions
        ingress_base = rm.ingress(batch)
        tags_base = rm.tags_in(batch)
        batched = Mode.MALICIOUS in mode and Mode.BATCHED_HASH in mode
        hashers = {t: link_hasher(batch, *t) for t in verifier_terms(self.party)} if batched else {}
        yield Sleep(self.cost.dma_startup_us)
        local = []
        for lo in range(0, n, self.stream_chunk):
            hi = min(n, lo + self.stream_chunk)
            yield Sleep(self.cost.compute_us(hi - lo))
            out = stage1_batch(self.party, xs[lo:hi], ys[lo:hi], self.keys, cmd.ctr_base, lo, mode)
            local.extend(out.local_acc)
            for term, payloads in out.egress.items():
                pos = ingress_position(term)
                self.endpoint.put(ROLES[term].receiver, RegionMap.plane(ingress_base, pos, n) + lo * ELEMENT_BYTES,
                                  pack(payloads), batch)
            if mode & Mode.MALICIOUS:
                for term, payloads in out.verified.items():
                    if hashers:
                        hashers[term].update(pack(payloads))
                        continue
                    off = RegionMap.tag_plane(tags_base, ingress_position(term), n, mode) + lo * TAG_BYTES
                    self.endpoint.put_tags(ROLES[term].receiver, off, tags_for(payloads, batch, lo, *term), batch)
        for term, h in hashers.items():
            off = RegionMap.tag_plane(tags_base, ingress_position(term), n, mode)
            self.endpoint.put_tags(ROLES[term].receiver, off, h.digest(), batch)
        inst.data_b = pack_triples(local)

        need_data = 3 * n * ELEMENT_BYTES
        need_tags = 0
        if mode & Mode.MALICIOUS:
            need_tags = 3 * LINK_HASH_BYTES if mode & Mode.BATCHED_HASH else 3 * n * TAG_BYTES
        ep = self.endpoint
        ing_hi = ingress_base + need_data
        tag_hi = tags_base + need_tags

        def ready():
            return (ep.arrived(batch, MsgType.PUT, ingress_base, ing_hi) >= need_data
                    and ep.arrived(batch, MsgType.TAGS, tags_base, tag_hi) >= need_tags)

        try:
            yield WaitFor(ep.gate, ready, self.ingress_timeout_us)
        except TimeoutError:
            raise TimeoutError(f"party {self.party}: ingress for batch {batch} incomplete") from None
        if batch in self.poisoned:
            raise BatchAborted(batch, self.poisoned[batch])
        z = self._finish(cmd, local, self.memory.read(ingress_base, need_data))
        self._store(cmd, pack_triples(z))
        return self.cost.job_time_us(n)
