"""Party daemon: one host, one accelerator engine, one fabric endpoint.

A node owns its host memory (carved up by :class:`RegionMap`), its three
PRF keys, and an :class:`Engine`.  It can originate work (deal inputs, submit
or trigger commands) or run headless, serving TRIGGER/PUT/GET from peers and
reporting completions and aborts back to whoever triggered the job.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .engine import (DEFAULT_MEMORY, RECORD_BYTES, AccelCostModel, CommandError, Engine, HostMemoryRegion,
                     LookasideCommand, Opcode, RegionMap, Status)
from .fabric import Endpoint, SimFabric, SocketTransport
from .protocol import NO_ELEMENT, Mode
from .ring import (PARTIES, KeyMaterial, ReplicatedShareView, deal, system_random, unpack, view_records)
from .runtime import SimKernel, ThreadRuntime, WaitFor
from .wire import (AbortReason, MsgType, WireMessage, completion_payload, parse_abort, parse_completion)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _flag(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _endpoint(s) -> tuple[str, int]:
    if isinstance(s, (list, tuple)):
        return str(s[0]), int(s[1])
    host, _, port = str(s).strip().rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"peer endpoint must be host:port, got {s!r}")
    return host, int(port)


@dataclass
class PartyConfig:
    party_id: int
    peers: list[tuple[str, int]] = field(default_factory=lambda: [("127.0.0.1", 7400 + p) for p in PARTIES])
    memory_size: int = DEFAULT_MEMORY
    num_accels: int = 1
    clock_mhz: float = 275.0
    cycles_per_element: float = 2.0
    dma_startup_us: float = 1.0
    bandwidth_gbps: float = 100.0
    latency_us: float = 1.0
    malicious: bool = False
    masking: bool = True
    batched_hash: bool = False
    key_file: str | None = None
    transport: str = "simulated"
    batch_slots: int = 4
    stream_chunk: int = 4096
    timeout_s: float = 60.0

    def __post_init__(self):
        self.party_id = int(self.party_id)
        self.peers = [_endpoint(p) for p in self.peers]
        for name in ("memory_size", "num_accels", "batch_slots", "stream_chunk"):
            setattr(self, name, int(getattr(self, name)))
        for name in ("clock_mhz", "cycles_per_element", "dma_startup_us", "bandwidth_gbps", "latency_us",
                     "timeout_s"):
            setattr(self, name, float(getattr(self, name)))
        for name in ("malicious", "masking", "batched_hash"):
            setattr(self, name, _flag(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if self.party_id not in PARTIES:
            raise ConfigError(f"party_id must be 0..3, got {self.party_id}")
        if len(self.peers) != 4:
            raise ConfigError(f"need exactly 4 peer endpoints, got {len(self.peers)}")
        if self.transport not in ("sockets", "simulated"):
            raise ConfigError(f"transport must be 'sockets' or 'simulated', got {self.transport!r}")
        if self.transport == "sockets" and len(set(self.peers)) != 4:
            raise ConfigError("peer endpoints must be distinct in socket mode")
        if self.num_accels < 1 or self.memory_size <= 0 or self.batch_slots < 1:
            raise ConfigError("num_accels, memory_size and batch_slots must be positive")
        if min(self.clock_mhz, self.cycles_per_element, self.dma_startup_us, self.bandwidth_gbps) <= 0:
            raise ConfigError("cost and link parameters must be positive")

    @property
    def mode(self) -> Mode:
        m = Mode.NONE
        if self.malicious:
            m |= Mode.MALICIOUS
        if self.masking:
            m |= Mode.MASKING
        if self.batched_hash:
            m |= Mode.BATCHED_HASH
        return m

    @property
    def cost(self) -> AccelCostModel:
        return AccelCostModel(self.clock_mhz, self.cycles_per_element, self.dma_startup_us)

    @classmethod
    def from_mapping(cls, data: dict) -> "PartyConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "party_id" not in data:
            raise ConfigError("config must set party_id")
        data = dict(data)
        if isinstance(data.get("peers"), str):
            data["peers"] = [p for p in data["peers"].split(",") if p.strip()]
        try:
            return cls(**data)
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(str(err)) from err

    @classmethod
    def parse(cls, text: str) -> "PartyConfig":
        """Flat ``key = value`` lines (``#`` comments) or a JSON object."""
        stripped = text.strip()
        if stripped.startswith("{"):
            try:
                return cls.from_mapping(json.loads(stripped))
            except json.JSONDecodeError as err:
                raise ConfigError(f"bad JSON config: {err}") from err
        data = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                key, sep, value = line.partition(":")
            if not sep:
                raise ConfigError(f"line {n}: expected key = value")
            data[key.strip()] = value.strip()
        return cls.from_mapping(data)

    @classmethod
    def load(cls, path) -> "PartyConfig":
        return cls.parse(Path(path).read_text())

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "peers":
                v = ",".join(f"{h}:{p}" for h, p in v)
            if v is None:
                continue
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


def _views(party: int, data: bytes) -> list[ReplicatedShareView]:
    vals = unpack(data)
    return [ReplicatedShareView.from_values(party, vals[i:i + 3]) for i in range(0, len(vals), 3)]


@dataclass(frozen=True)
class DealHandle:
    batch_id: int
    operand: str
    offset: int
    count: int


@dataclass
class RemoteJob:
    request: int
    dst: int
    cmd: LookasideCommand
    ticket: int | None = None
    accepted: bool = False
    status: Status | None = None
    time_us: float = 0.0
    abort_element: int | None = None


class Node:
    def __init__(self, config: PartyConfig, keys: KeyMaterial | None = None, runtime=None,
                 fabric: SimFabric | None = None):
        self.config = config
        self.party = config.party_id
        if keys is None and config.key_file:
            keys = KeyMaterial.load(config.key_file)
        if keys is not None and keys.owner != self.party:
            raise ConfigError(f"key file belongs to party {keys.owner}, not {self.party}")
        self.keys = keys
        if config.transport == "simulated":
            if fabric is None:
                raise ConfigError("simulated transport needs a shared SimFabric")
            runtime = fabric.kernel
        self.runtime = runtime or ThreadRuntime()
        self.fabric = fabric
        self.memory = HostMemoryRegion(config.memory_size)
        self.regions = RegionMap(config.memory_size, config.batch_slots)
        self.regions.register_all(self.memory)
        self.endpoint = Endpoint(self.party, self.memory, self.runtime)
        timeout_us = None if self.runtime.simulated else config.timeout_s * 1e6
        self.endpoint.get_timeout_us = timeout_us
        self.engine = Engine(self.party, self.memory, self.runtime, self.endpoint, keys, config.num_accels,
                             config.cost, self.regions, config.stream_chunk, timeout_us)
        self.engine.listeners.append(self._job_done)
        self.endpoint.on_trigger = self._on_trigger
        self.endpoint.on_completion = self._on_completion
        self.endpoint.on_abort = self._on_abort
        self.transport: SocketTransport | None = None
        self.remote: dict[int, RemoteJob] = {}
        self.aborts: list[tuple[int, int, AbortReason, int]] = []   # (from, batch, reason, element)
        self.headless = False
        self.triggers_sent = 0
        self._requests = itertools.count(1)
        self._ctr = 0
        self._stop = threading.Event()

    # -- lifecycle

    def start(self, timeout_s: float | None = None) -> "Node":
        if self.config.transport == "simulated":
            self.fabric.attach(self.endpoint)
            for (s, d), link in self.fabric.links.items():
                if s == self.party:
                    link.bandwidth_gbps = self.config.bandwidth_gbps
                    link.latency_us = self.config.latency_us
        else:
            self.transport = SocketTransport(self.party, self.config.peers, self.endpoint)
            self.transport.connect(timeout_s if timeout_s is not None else self.config.timeout_s)
        log.info("party %d up (%s, %d accelerators, %d batch slots of %d elements)", self.party,
                 self.config.transport, self.config.num_accels, self.regions.slots, self.regions.capacity)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self.transport:
            self.transport.close()

    def run_headless(self) -> None:
        """Serve peers until :meth:`stop`; never originates commands."""
        self.headless = True
        log.info("party %d serving as headless target", self.party)
        if self.runtime.simulated:
            return
        self._stop.wait()

    def _wait(self, gen, timeout=None):
        return self.runtime.wait(self.runtime.spawn(gen, name=f"p{self.party}-host"), timeout)

    def _originate(self):
        if self.headless:
            raise RuntimeError(f"party {self.party} is headless and does not originate commands")

    # -- inputs

    def deal_inputs(self, secrets: Sequence[int], batch_id: int, operand: str = "a",
                    rand=system_random) -> DealHandle:
        """Share ``secrets`` from this host: keep our view, PUT each peer its view.

        Only shares cross the fabric; the plaintext never leaves this process.
        """
        self._originate()
        if operand not in ("a", "b"):
            raise ValueError("operand must be 'a' or 'b'")
        offset = self.regions.input_a(batch_id) if operand == "a" else self.regions.input_b(batch_id)
        n = len(secrets)
        if n == 0:
            return DealHandle(batch_id, operand, offset, 0)
        self.regions.check(n)
        dealt = [deal(s, rand) for s in secrets]
        for p in PARTIES:
            self.endpoint.put(p, offset, view_records(dealt, p), batch_id)
        return DealHandle(batch_id, operand, offset, n)

    def write_views(self, offset: int, views: Sequence[ReplicatedShareView]) -> None:
        self.memory.write(offset, b"".join(v.to_bytes() for v in views))

    def read_views(self, offset: int, count: int, party: int | None = None) -> list[ReplicatedShareView]:
        party = self.party if party is None else party
        return _views(party, self.memory.read(offset, count * RECORD_BYTES))

    def fetch_views(self, peer: int, offset: int, count: int, batch_id: int = 0) -> list[ReplicatedShareView]:
        """Pull ``count`` share records from ``peer`` with a fabric GET."""
        return _views(peer, self._wait(self.endpoint.get(peer, offset, count * RECORD_BYTES, batch_id)))

    # -- commands

    def allocate_counters(self, count: int) -> int:
        base = self._ctr
        self._ctr += 16 * count
        return base

    def command(self, opcode: Opcode, batch_id: int, count: int, party: int | None = None,
                mode: Mode | None = None, ctr_base: int = 0, **overrides) -> LookasideCommand:
        """Command for ``party`` (default: us) using the standard region map offsets."""
        p = self.party if party is None else party
        rm = self.regions
        fields = dict(opcode=opcode, flags=int(self.config.mode if mode is None else mode), src_party=p,
                      dst_party=p, count=count, batch_id=batch_id, src_a=rm.input_a(batch_id),
                      src_b=rm.input_b(batch_id), dst=rm.output(batch_id), ctr_base=ctr_base)
        if opcode == Opcode.MUL_STAGE1:
            fields["dst"] = rm.intermediate(batch_id)
        elif opcode == Opcode.MUL_STAGE2:
            fields["src_a"], fields["src_b"] = rm.intermediate(batch_id), rm.ingress(batch_id)
        fields.update(overrides)
        return LookasideCommand(**fields)

    def submit(self, cmd: LookasideCommand) -> int:
        self._originate()
        return self.engine.submit(cmd)

    def wait(self, ticket: int, timeout: float | None = None):
        return self.engine.wait(ticket, timeout)

    def trigger_async(self, dst: int, cmd: LookasideCommand) -> int:
        """Send a TRIGGER; returns a request id to poll in :attr:`remote`."""
        self._originate()
        if dst == self.party:
            raise ValueError("use submit() for local commands")
        req = next(self._requests)
        self.remote[req] = RemoteJob(req, dst, cmd)
        self.triggers_sent += 1
        self.endpoint.send(WireMessage(MsgType.TRIGGER, self.party, dst, cmd.batch_id, req, cmd.pack()))
        return req

    def trigger(self, dst: int, cmd: LookasideCommand) -> int:
        """Enqueue ``cmd`` on ``dst``'s engine; returns the remote ticket."""
        req = self.trigger_async(dst, cmd)
        job = self._wait(self._await_remote(req, final=False))
        if job.status == Status.ERROR and not job.accepted:
            raise CommandError(f"party {dst} rejected the command")
        return job.ticket

    def wait_remote(self, req: int, timeout: float | None = None) -> RemoteJob:
        return self._wait(self._await_remote(req, final=True), timeout)

    def _await_remote(self, req: int, final: bool):
        job = self.remote[req]
        if final:
            yield WaitFor(self.endpoint.gate, lambda: job.status is not None and job.status != Status.ACCEPTED)
        else:
            yield WaitFor(self.endpoint.gate, lambda: job.accepted or job.status is not None)
        return job

    # -- fabric callbacks (run on receive path; must not block)

    def _on_trigger(self, msg: WireMessage) -> None:
        try:
            cmd = LookasideCommand.unpack(msg.payload)
            if cmd.src_party != self.party and cmd.dst_party != self.party:
                raise CommandError("triggered command does not involve this party")
            ticket = self.engine.submit(cmd, origin=(msg.src, msg.offset))
            status = Status.ACCEPTED
        except CommandError as err:
            log.warning("party %d rejected trigger from %d: %s", self.party, msg.src, err)
            ticket, status, cmd = 0, Status.ERROR, None
        op = cmd.opcode if cmd else msg.payload[0]
        self.endpoint.send(WireMessage(MsgType.COMPLETION, self.party, msg.src, msg.batch_id, msg.offset,
                                       completion_payload(ticket, op, status, 0.0)))

    def _job_done(self, job, ev) -> None:
        if job.origin is None:
            return
        src, req = job.origin
        if ev.status == Status.ABORT:
            reason = AbortReason.TAG_MISMATCH if ev.term is not None else AbortReason.POISONED
            if ev.term is not None and ev.element is None:
                reason = AbortReason.LINK_HASH_MISMATCH
            self.endpoint.abort(src, ev.batch_id, reason, NO_ELEMENT if ev.element is None else ev.element, req)
        self.endpoint.send(WireMessage(MsgType.COMPLETION, self.party, src, ev.batch_id, req,
                                       completion_payload(ev.ticket, ev.opcode, ev.status, ev.simulated_time_us)))

    def _on_completion(self, msg: WireMessage) -> None:
        job = self.remote.get(msg.offset)
        if job is None or job.dst != msg.src:
            log.warning("party %d: stray completion from %d", self.party, msg.src)
            return
        ticket, _, status, t = parse_completion(msg.payload)
        with self.endpoint.gate:
            if status == Status.ACCEPTED:
                job.ticket, job.accepted = ticket, True
            else:
                job.status, job.time_us = Status(status), t
                if ticket:
                    job.ticket = ticket
        self.endpoint.gate.notify()

    def _on_abort(self, msg: WireMessage) -> None:
        reason, element = parse_abort(msg.payload)
        log.warning("party %d: abort from party %d for batch %d (%s, element %d)", self.party, msg.src,
                    msg.batch_id, reason.name, element)
        self.aborts.append((msg.src, msg.batch_id, reason, element))
        job = self.remote.get(msg.offset)
        if job is not None and job.dst == msg.src:
            job.abort_element = None if element == NO_ELEMENT else element
        if reason in (AbortReason.TAG_MISMATCH, AbortReason.LINK_HASH_MISMATCH, AbortReason.POISONED):
            self.engine.poisoned.setdefault(msg.batch_id, None)


def simulated_cluster(configs: Sequence[PartyConfig] | None = None, keys: dict[int, KeyMaterial] | None = None,
                      kernel: SimKernel | None = None, **overrides) -> list[Node]:
    """Four started nodes sharing one virtual clock and simulated fabric."""
    from .ring import generate_keys
    kernel = kernel or SimKernel()
    if configs is None:
        configs = [PartyConfig(party_id=p, **overrides) for p in PARTIES]
    bw = configs[0].bandwidth_gbps
    lat = configs[0].latency_us
    fabric = SimFabric(kernel, bw, lat)
    keys = keys or generate_keys()
    nodes = [Node(c, keys[c.party_id], fabric=fabric) for c in configs]
    for n in nodes:
        n.start()
    if sorted(n.party for n in nodes) != list(PARTIES):
        raise ConfigError("a cluster needs parties 0..3 exactly once")
    return nodes
