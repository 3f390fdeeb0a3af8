"""Acceptance gate: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import json
import os
import random
import subprocess
import sys
import time

import pytest

from copampc.bench import run_sim, saturation_report, write_reports
from copampc.engine import AccelCostModel, Opcode, Status, per_link_rate
from copampc.fabric import combined, min_accels
from copampc.protocol import Mode
from copampc.ring import PARTIES
from copampc.wire import MsgType

from support import MAL, cluster, free_ports, fused, load, outputs, products, tamper

criterion = pytest.mark.criterion


@criterion(1, "10^4 simulated multiplies match x*y mod 2^128")
def test_correctness_oracle():
    n = 10_000
    t0 = time.perf_counter()
    kernel, nodes, rng = cluster(seed=101, memory_size=64 << 20)
    xs = [rng.getrandbits(128) for _ in range(n)]
    ys = [rng.getrandbits(128) for _ in range(n)]
    xs[:4] = [0, 1, 2**128 - 1, 2**127]
    ys[:4] = [2**128 - 1, 2**128 - 1, 2**128 - 1, 2]
    load(kernel, nodes, xs, ys, 1, rng)
    evs = fused(kernel, nodes, 1, n)
    assert all(ev.status == Status.OK for ev in evs)
    want = [(x * y) & ((1 << 128) - 1) for x, y in zip(xs, ys)]
    assert outputs(nodes, 1, n) == want
    assert outputs(nodes, 1, n, pair=(3, 2)) == want
    assert time.perf_counter() - t0 < 10


@criterion(2, "payload egress 48n per party, 16n per link (24n malicious)")
@pytest.mark.parametrize("n", [1, 7, 256, 3000])
def test_traffic_shape(n):
    for mode, per_link in (("base", 16), ("malicious", 24)):
        res = run_sim(n, mode, seed=n)
        assert len(res.link_payload) == 12
        assert set(res.link_payload.values()) == {per_link * n}
        assert set(res.party_egress.values()) == {3 * per_link * n}
        if mode == "base":
            assert set(res.party_egress.values()) == {48 * n}


@criterion(3, "malicious/base per-link payload ratio is 1.500")
def test_overhead_ratio():
    n = 1024
    base = run_sim(n, "base", seed=1).link_payload
    mal = run_sim(n, "malicious", seed=1).link_payload
    for link in base:
        assert mal[link] / base[link] == 1.5
    model = per_link_rate(AccelCostModel(), True) / per_link_rate(AccelCostModel())
    assert model == pytest.approx(1.5, abs=1e-12)
    assert abs(model - 26.3 / 17.5) / (26.3 / 17.5) < 0.005


@criterion(4, "per-link rate 17.6 / 26.4 Gb/s within (17.5, 18.0) / (26.3, 27.0)")
def test_rate_model():
    m = AccelCostModel()
    assert (m.clock_mhz, m.cycles_per_element) == (275.0, 2.0)
    base, mal = per_link_rate(m), per_link_rate(m, malicious=True)
    assert round(base, 1) == 17.6 and round(mal, 1) == 26.4
    assert 17.5 < base < 18.0
    assert 26.3 < mal < 27.0


@criterion(5, "min_accels(100 Gb/s) is 6 base and 4 malicious")
def test_saturation_counts():
    m = AccelCostModel()
    assert min_accels(100, per_link_rate(m)) == 6
    assert min_accels(100, per_link_rate(m, True)) == 4
    assert saturation_report(100).min_accels == {"base": 6, "malicious": 4}


def _flip_run(kind, src, dst, bit, seed):
    n = 8
    kernel, nodes, rng = cluster(seed=seed, memory_size=1 << 20)
    xs = [rng.getrandbits(128) for _ in range(n)]
    ys = [rng.getrandbits(128) for _ in range(n)]
    load(kernel, nodes, xs, ys, 0, rng)
    hit = tamper(nodes[0].fabric, lambda m: m.type == kind and m.src == src and m.dst == dst, bit)
    evs = fused(kernel, nodes, 0, n, MAL)
    assert hit["hit"] is not None
    return evs


@criterion(6, "every sampled single-bit flip (>= 512) aborts with the element identified")
def test_abort_soundness():
    rng = random.Random(6)
    links = [(s, d) for s in PARTIES for d in PARTIES if s != d]
    positions = []
    for kind, width in ((MsgType.PUT, 16), (MsgType.TAGS, 8)):
        for i in range(288):
            s, d = links[i % 12]
            positions.append((kind, s, d, rng.randrange(8 * 8 * width), width))
    assert len(positions) >= 512
    missed = []
    for i, (kind, s, d, bit, width) in enumerate(positions):
        evs = _flip_run(kind, s, d, bit, seed=i)
        want = bit // 8 // width
        ev = evs[d]
        if ev.status != Status.ABORT or ev.element != want:
            missed.append((kind.name, s, d, bit, ev.status.name, ev.element))
        assert all(e.status == Status.OK for p, e in enumerate(evs) if p != d)
    assert not missed, missed[:10]
    for seed in range(64):
        kernel, nodes, rng = cluster(seed=10_000 + seed, memory_size=1 << 20)
        xs = [rng.getrandbits(128) for _ in range(8)]
        ys = [rng.getrandbits(128) for _ in range(8)]
        load(kernel, nodes, xs, ys, 0, rng)
        assert all(ev.status == Status.OK for ev in fused(kernel, nodes, 0, 8, MAL))
        assert outputs(nodes, 0, 8) == products(xs, ys)


def _masked_run(mode):
    kernel, nodes, rng = cluster(seed=77)
    n = 64
    xs = [rng.getrandbits(128) for _ in range(n)]
    ys = [rng.getrandbits(128) for _ in range(n)]
    load(kernel, nodes, xs, ys, 0, rng)
    wire = []
    fab = nodes[0].fabric
    send = fab.send

    def capture(msg):
        wire.append(msg.payload)
        send(msg)
    fab.send = capture
    fused(kernel, nodes, 0, n, mode, ctr=0)
    off = nodes[0].regions.output(0)
    return [nd.memory.read(off, n * 48) for nd in nodes], wire, products(xs, ys), outputs(nodes, 0, n)


@criterion(7, "masking on/off: identical output regions, different wire payloads")
def test_mask_cancellation():
    for extra in (Mode.NONE, Mode.MALICIOUS):
        out_on, wire_on, want, got = _masked_run(Mode.MASKING | extra)
        out_off, wire_off, _, _ = _masked_run(extra)
        assert got == want
        assert out_on == out_off
        assert len(wire_on) == len(wire_off)
        assert wire_on != wire_off
        assert sum(a != b for a, b in zip(wire_on, wire_off)) >= 12


@criterion(8, "ADD changes no fabric counters")
def test_addition_locality():
    kernel, nodes, rng = cluster(seed=8)
    n = 500
    xs = [rng.getrandbits(128) for _ in range(n)]
    ys = [rng.getrandbits(128) for _ in range(n)]
    load(kernel, nodes, xs, ys, 0, rng)
    before = combined(nd.endpoint for nd in nodes)
    before_sent = [nd.endpoint.metrics.snapshot() for nd in nodes]
    for nd in nodes:
        nd.engine.submit(nodes[0].command(Opcode.ADD, 0, n, party=nd.party))
    kernel.run()
    after = combined(nd.endpoint for nd in nodes)
    assert after.links == before.links
    assert [nd.endpoint.metrics.snapshot().links for nd in nodes] == [s.links for s in before_sent]
    assert outputs(nodes, 0, n) == [(x + y) % 2**128 for x, y in zip(xs, ys)]


@criterion(9, "ops/s at batch 16384 >= 5x batch 16, monotone sweep, < 5 s")
def test_batch_scaling():
    t0 = time.perf_counter()
    sweep = [16, 64, 256, 1024, 4096, 16384]
    rates = [run_sim(b, "base", seed=b).row.ops_per_s for b in sweep]
    elapsed = time.perf_counter() - t0
    assert rates == sorted(rates) and len(set(rates)) == len(rates)
    assert rates[-1] >= 5 * rates[0]
    assert elapsed < 5, f"sweep took {elapsed:.2f} s"


def _config(path, party, ports, key):
    path.write_text(f"party_id = {party}\n"
                    f"peers = {','.join(f'127.0.0.1:{p}' for p in ports)}\n"
                    "transport = sockets\n"
                    f"key_file = {key}\n"
                    "batch_slots = 1\n"
                    "timeout_s = 50\n")


@criterion(10, "4 localhost processes, 3 headless, 10^5 verified multiplies in < 60 s")
def test_end_to_end_sockets(tmp_path):
    cmd = [sys.executable, "-m", "copampc.cli"]
    env = dict(os.environ, PYTHONUNBUFFERED="1")
    t0 = time.perf_counter()
    subprocess.run(cmd + ["keygen", "--out", str(tmp_path / "keys")], check=True, capture_output=True)
    ports = free_ports()
    for p in PARTIES:
        _config(tmp_path / f"p{p}.cfg", p, ports, tmp_path / "keys" / f"party{p}.key")
    peers = [subprocess.Popen(cmd + ["node", "--config", str(tmp_path / f"p{p}.cfg"), "--headless"], env=env,
                              stdout=subprocess.PIPE, stderr=subprocess.STDOUT) for p in (1, 2, 3)]
    try:
        bench = subprocess.run(cmd + ["bench", "--transport", "sockets", "--config", str(tmp_path / "p0.cfg"),
                                      "--batch", "100000", "--seed", "10", "--report", str(tmp_path / "e2e")],
                               capture_output=True, text=True, timeout=120, env=env)
        elapsed = time.perf_counter() - t0
    finally:
        for p in peers:
            p.terminate()
        for p in peers:
            p.wait(10)
    assert bench.returncode == 0, bench.stdout + bench.stderr
    row = json.loads((tmp_path / "e2e.json").read_text())[0]
    assert row["batch"] == 100_000 and row["aborts"] == 0
    assert elapsed < 60, f"end-to-end took {elapsed:.1f} s"


@criterion(11, "seeded simulated runs give identical reports and timelines")
def test_determinism(tmp_path):
    runs = []
    for i in range(2):
        results = [run_sim(b, m, accels=a, seed=42) for b, m, a in ((64, "base", 1), (500, "malicious", 2))]
        csv_path, json_path = write_reports([r.row for r in results], tmp_path / f"run{i}")
        runs.append(([r.timeline for r in results], csv_path.read_bytes(), json_path.read_bytes()))
    assert runs[0] == runs[1]
    assert all(len(t) > 0 for t in runs[0][0])
