"""Benchmark harness: dealt-random multiply batches, checked against plaintext.

Every run reconstructs all outputs and compares them with ``x*y mod 2^128``
before a row is produced; an incorrect batch raises instead of reporting.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .engine import AccelCostModel, Opcode, Status, per_link_rate
from .fabric import combined, min_accels
from .node import Node, PartyConfig, simulated_cluster
from .protocol import Mode
from .ring import MOD, PARTIES, KeyMaterial, generate_keys, reconstruct
from .runtime import SimKernel

log = logging.getLogger(__name__)

COLUMNS = ("batch", "mode", "accels", "ops_per_s", "per_link_gbps", "total_gbps", "time_us", "aborts")
MODES = {"base": Mode.MASKING, "malicious": Mode.MASKING | Mode.MALICIOUS}


class VerificationFailed(RuntimeError):
    """Outputs disagreed with the plaintext oracle, or the batch aborted."""


@dataclass
class BenchRow:
    batch: int
    mode: str
    accels: int
    ops_per_s: float
    per_link_gbps: float
    total_gbps: float
    time_us: float
    aborts: int

    def as_dict(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}


@dataclass
class BenchResult:
    row: BenchRow
    link_payload: dict[tuple[int, int], int] = field(default_factory=dict)
    party_egress: dict[int, int] = field(default_factory=dict)
    timeline: list = field(default_factory=list)


@dataclass
class SaturationReport:
    link_gbps: float
    per_accel_gbps: dict[str, float]
    min_accels: dict[str, int]
    offered_load: dict[str, dict[int, float]]

    def as_dict(self) -> dict:
        return asdict(self)

    def format(self) -> str:
        lines = [f"link: {self.link_gbps:g} Gb/s"]
        for m in ("base", "malicious"):
            lines.append(f"{m:>9}: {self.per_accel_gbps[m]:.1f} Gb/s per accelerator per link, "
                         f"{self.min_accels[m]} accelerator(s) to saturate")
        lines.append("offered load per link (Gb/s) by accelerator count:")
        lines.append("  A   base  malicious")
        for a in sorted(self.offered_load["base"]):
            lines.append(f"  {a}  {self.offered_load['base'][a]:5.1f}  {self.offered_load['malicious'][a]:9.1f}")
        return "\n".join(lines)


def offered_load(accels: int, per_accel_gbps: float, link_gbps: float) -> float:
    return min(accels * per_accel_gbps, link_gbps)


def saturation_report(link_gbps: float = 100.0, cost: AccelCostModel | None = None,
                      max_accels: int = 8) -> SaturationReport:
    cost = cost or AccelCostModel()
    rates = {m: per_link_rate(cost, malicious=(m == "malicious")) for m in ("base", "malicious")}
    return SaturationReport(
        link_gbps=link_gbps,
        per_accel_gbps=rates,
        min_accels={m: min_accels(link_gbps, r) for m, r in rates.items()},
        offered_load={m: {a: offered_load(a, r, link_gbps) for a in range(1, max_accels + 1)}
                      for m, r in rates.items()},
    )


def _rng(seed: int | None) -> random.Random:
    return random.Random(seed) if seed is not None else random.SystemRandom()


def _check(xs, ys, views_a, views_b) -> None:
    bad = [i for i, (x, y, u, v) in enumerate(zip(xs, ys, views_a, views_b)) if reconstruct(u, v) != x * y % MOD]
    if bad:
        raise VerificationFailed(f"{len(bad)} of {len(xs)} products disagree with the plaintext oracle "
                                 f"(first at element {bad[0]})")


def _split(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n))
    step, extra = divmod(n, parts)
    out, lo = [], 0
    for i in range(parts):
        hi = lo + step + (1 if i < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def run_sim(batch: int, mode: str = "base", accels: int = 1, seed: int | None = 0,
            cost: AccelCostModel | None = None, bandwidth_gbps: float = 100.0, latency_us: float = 1.0,
            drive: str = "local", memory_size: int = 64 << 20, stream_chunk: int = 4096) -> BenchResult:
    """One multiply batch across four simulated parties.

    With ``accels > 1`` the batch is split into that many sub-batches that run
    concurrently on separate accelerator instances and share the links.
    """
    if batch < 1:
        raise ValueError("batch must be at least 1")
    rng = _rng(seed)
    cost = cost or AccelCostModel()
    keys = generate_keys(rng.randbytes) if seed is not None else generate_keys()
    kernel = SimKernel()
    slots = max(4, accels)
    nodes = simulated_cluster(keys=keys, kernel=kernel, num_accels=accels, clock_mhz=cost.clock_mhz,
                              cycles_per_element=cost.cycles_per_element, dma_startup_us=cost.dma_startup_us,
                              bandwidth_gbps=bandwidth_gbps, latency_us=latency_us, memory_size=memory_size,
                              batch_slots=slots, stream_chunk=stream_chunk)
    init = nodes[0]
    flags = MODES[mode]
    xs = [rng.getrandbits(128) for _ in range(batch)]
    ys = [rng.getrandbits(128) for _ in range(batch)]
    draw = lambda: rng.getrandbits(128)  # noqa: E731
    parts = _split(batch, accels)
    batch_ids = list(range(1, len(parts) + 1))
    for bid, (lo, hi) in zip(batch_ids, parts):
        init.deal_inputs(xs[lo:hi], bid, "a", draw)
        init.deal_inputs(ys[lo:hi], bid, "b", draw)
    kernel.run()
    before = combined(n.endpoint for n in nodes)
    start = kernel.now()
    jobs = []   # (node, ticket-or-request, remote?)
    for bid, (lo, hi) in zip(batch_ids, parts):
        ctr = init.allocate_counters(hi - lo)
        for nd in nodes:
            cmd = init.command(Opcode.MUL_FUSED, bid, hi - lo, party=nd.party, mode=flags, ctr_base=ctr)
            if drive == "local" or nd is init:
                jobs.append((nd, nd.engine.submit(cmd), False))
            else:
                jobs.append((nd, init.trigger_async(nd.party, cmd), True))
    for nd in nodes[1:]:
        if drive != "local":
            nd.headless = True
    kernel.run()
    aborts, end = 0, start
    for nd, handle, remote in jobs:
        if remote:
            st = init.remote[handle].status
            ev = nd.engine.events.get(init.remote[handle].ticket)
        else:
            ev = nd.engine.events.get(handle)
            st = ev.status if ev else None
        if st is None or ev is None:
            raise VerificationFailed(f"party {nd.party} never completed its job")
        aborts += st == Status.ABORT
        end = max(end, ev.end_us)
    if aborts:
        raise VerificationFailed(f"{aborts} job(s) aborted on an honest run")
    for bid, (lo, hi) in zip(batch_ids, parts):
        out = init.regions.output(bid)
        _check(xs[lo:hi], ys[lo:hi], nodes[0].read_views(out, hi - lo), nodes[1].read_views(out, hi - lo))
    delta = combined(n.endpoint for n in nodes) - before
    elapsed = end - start
    link_payload = {(s, d): delta.link(s, d).payload_bytes for s in PARTIES for d in PARTIES if s != d}
    total_bits = 8 * sum(link_payload.values())
    row = BenchRow(batch=batch, mode=mode, accels=accels, ops_per_s=batch / elapsed * 1e6,
                   per_link_gbps=total_bits / len(link_payload) / (elapsed * 1e3),
                   total_gbps=total_bits / (elapsed * 1e3), time_us=elapsed, aborts=aborts)
    return BenchResult(row, link_payload, {p: delta.egress(p).payload_bytes for p in PARTIES},
                       list(kernel.timeline))


def run_sockets(config: PartyConfig, batch: int, mode: str = "base", seed: int | None = None,
                keys: KeyMaterial | None = None, node: Node | None = None, batch_id: int = 1) -> BenchResult:
    """Drive a batch from this process (party ``config.party_id``) with headless peers."""
    rng = _rng(seed)
    own = node is None
    if own:
        node = Node(config, keys).start()
    try:
        flags = MODES[mode]
        xs = [rng.getrandbits(128) for _ in range(batch)]
        ys = [rng.getrandbits(128) for _ in range(batch)]
        draw = lambda: rng.getrandbits(128)  # noqa: E731
        node.deal_inputs(xs, batch_id, "a", draw)
        node.deal_inputs(ys, batch_id, "b", draw)
        ctr = node.allocate_counters(batch)
        before = node.endpoint.metrics.snapshot()
        t0 = time.perf_counter()
        peers = [p for p in PARTIES if p != node.party]
        reqs = [node.trigger_async(q, node.command(Opcode.MUL_FUSED, batch_id, batch, party=q, mode=flags,
                                                   ctr_base=ctr)) for q in peers]
        ev = node.wait(node.submit(node.command(Opcode.MUL_FUSED, batch_id, batch, mode=flags, ctr_base=ctr)),
                       config.timeout_s)
        remote = [node.wait_remote(r, config.timeout_s) for r in reqs]
        elapsed = (time.perf_counter() - t0) * 1e6
        aborts = (ev.status == Status.ABORT) + sum(r.status == Status.ABORT for r in remote)
        if aborts or ev.status != Status.OK or any(r.status != Status.OK for r in remote):
            raise VerificationFailed(f"batch {batch_id} did not complete cleanly: local {ev.status.name}, "
                                     f"remote {[r.status.name for r in remote]}")
        delta = node.endpoint.metrics.snapshot() - before
        out = node.regions.output(batch_id)
        mine = node.read_views(out, batch)
        theirs = node.fetch_views(peers[0], out, batch, batch_id)
        _check(xs, ys, mine, theirs)
        link_payload = {(node.party, d): delta.link(node.party, d).payload_bytes for d in peers}
        per_link = sum(link_payload.values()) / len(peers)
        row = BenchRow(batch=batch, mode=mode, accels=config.num_accels, ops_per_s=batch / elapsed * 1e6,
                       per_link_gbps=8 * per_link / (elapsed * 1e3),
                       total_gbps=8 * per_link * 12 / (elapsed * 1e3), time_us=elapsed, aborts=aborts)
        return BenchResult(row, link_payload, {node.party: delta.egress(node.party).payload_bytes})
    finally:
        if own:
            node.stop()


def write_reports(rows: Sequence[BenchRow], path: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` holding identical values."""
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".csv", ".json") else path
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.as_dict().items()})
    json_path.write_text(json.dumps([r.as_dict() for r in rows], indent=2) + "\n")
    return csv_path, json_path


def read_csv(path: str | Path) -> list[dict]:
    types = {"batch": int, "mode": str, "accels": int, "aborts": int}
    with Path(path).open() as fh:
        return [{k: types.get(k, float)(v) for k, v in row.items()} for row in csv.DictReader(fh)]
