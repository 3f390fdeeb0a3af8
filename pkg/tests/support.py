"""Shared helpers for tests that drive a simulated four-party cluster."""

from __future__ import annotations

import random

from copampc.engine import Opcode
from copampc.node import simulated_cluster
from copampc.protocol import Mode
from copampc.ring import MOD, generate_keys, reconstruct
from copampc.runtime import SimKernel

MAL = Mode.MASKING | Mode.MALICIOUS


def cluster(seed=0, **overrides):
    rng = random.Random(seed)
    kernel = SimKernel()
    overrides.setdefault("memory_size", 8 << 20)
    nodes = simulated_cluster(keys=generate_keys(rng.randbytes), kernel=kernel, **overrides)
    return kernel, nodes, rng


def load(kernel, nodes, xs, ys, batch, rng):
    draw = lambda: rng.getrandbits(128)  # noqa: E731
    nodes[0].deal_inputs(xs, batch, "a", draw)
    nodes[0].deal_inputs(ys, batch, "b", draw)
    kernel.run()


def fused(kernel, nodes, batch, n, mode=Mode.MASKING, ctr=None):
    ctr = nodes[0].allocate_counters(n) if ctr is None else ctr
    tickets = [nd.engine.submit(nodes[0].command(Opcode.MUL_FUSED, batch, n, party=nd.party, mode=mode,
                                                 ctr_base=ctr)) for nd in nodes]
    kernel.run()
    return [nd.engine.events[t] for nd, t in zip(nodes, tickets)]


def outputs(nodes, batch, n, pair=(0, 1)):
    off = nodes[0].regions.output(batch)
    u = nodes[pair[0]].read_views(off, n)
    v = nodes[pair[1]].read_views(off, n)
    return [reconstruct(a, b) for a, b in zip(u, v)]


def products(xs, ys):
    return [x * y % MOD for x, y in zip(xs, ys)]


def tamper(fab, match, bit):
    """Flip ``bit`` of the first in-flight message for which ``match(msg)`` holds."""
    import dataclasses
    sent = fab.send
    state = {"hit": None}

    def send(msg):
        if state["hit"] is None and match(msg):
            buf = bytearray(msg.payload)
            buf[bit // 8] ^= 1 << (bit % 8)
            state["hit"] = msg
            msg = dataclasses.replace(msg, payload=bytes(buf))
        sent(msg)
    fab.send = send
    return state


def free_ports(n=4):
    import socket
    socks = [socket.socket() for _ in range(n)]
    for s in socks:
        s.bind(("127.0.0.1", 0))
    ports = [s.getsockname()[1] for s in socks]
    for s in socks:
        s.close()
    return ports
