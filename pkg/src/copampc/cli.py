"""``copa`` command line: keygen, deal, bench, saturate, node.

Exit codes: 0 success, 2 verification failure or abort, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import random
import signal
import sys
from pathlib import Path

from . import __version__
from .bench import MODES, VerificationFailed, run_sim, run_sockets, saturation_report, write_reports
from .engine import AccelCostModel
from .node import ConfigError, Node, PartyConfig
from .ring import PARTIES, ShareError, deal, generate_keys, system_random, view_of

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 2, 3
DEFAULT_SWEEP = (16, 64, 256, 1024, 4096, 16384)

log = logging.getLogger("copa")


def _ints(text: str) -> list[int]:
    try:
        return [int(t, 0) for t in text.split(",") if t.strip()]
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def cmd_keygen(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = generate_keys()
    for p, km in keys.items():
        path = out / f"party{p}.key"
        km.save(path)
        print(f"party {p}: {path}")
    return EXIT_OK


def cmd_deal(args) -> int:
    """Write one share file per party: 48-byte records, one per secret."""
    rng = random.Random(args.seed) if args.seed is not None else None
    draw = (lambda: rng.getrandbits(128)) if rng else system_random
    dealt = [deal(v, draw) for v in args.values]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in PARTIES:
        path = out / f"party{p}.shares"
        path.write_bytes(b"".join(view_of(d, p).to_bytes() for d in dealt))
        print(f"party {p}: {path} ({len(dealt)} records)")
    return EXIT_OK


def _cost(args) -> AccelCostModel:
    return AccelCostModel(args.clock, args.cpe, args.startup)


def cmd_saturate(args) -> int:
    rep = saturation_report(args.link, _cost(args), args.max_accels)
    print(json.dumps(rep.as_dict(), indent=2) if args.json else rep.format())
    return EXIT_OK


def cmd_bench(args) -> int:
    batches = list(DEFAULT_SWEEP) if args.sweep and not args.batches else (args.batches or [1024])
    modes = ["base", "malicious"] if args.mode == "both" else [args.mode]
    rows = []
    if args.transport == "simulated":
        cost = _cost(args)
        for m in modes:
            for b in batches:
                res = run_sim(b, m, args.accels, args.seed, cost, args.link, args.latency)
                rows.append(res.row)
    else:
        if not args.config:
            raise ConfigError("--transport sockets needs --config for this party")
        cfg = PartyConfig.load(args.config)
        if cfg.transport != "sockets":
            raise ConfigError("config transport must be 'sockets' for a socket benchmark")
        node = Node(cfg).start()
        try:
            for i, (m, b) in enumerate((m, b) for m in modes for b in batches):
                rows.append(run_sockets(cfg, b, m, args.seed, node=node, batch_id=i + 1).row)
        finally:
            node.stop()
    print(f"{'batch':>8} {'mode':>9} {'accels':>6} {'ops/s':>14} {'Gb/s/link':>10} {'Gb/s':>9} {'time_us':>12}")
    for r in rows:
        print(f"{r.batch:>8} {r.mode:>9} {r.accels:>6} {r.ops_per_s:>14.1f} {r.per_link_gbps:>10.2f} "
              f"{r.total_gbps:>9.2f} {r.time_us:>12.2f}")
    if args.report:
        for p in write_reports(rows, args.report):
            print(f"wrote {p}")
    return EXIT_OK


def cmd_node(args) -> int:
    cfg = PartyConfig.load(args.config)
    if cfg.transport != "sockets":
        raise ConfigError("a standalone node needs transport = sockets")
    node = Node(cfg).start()
    signal.signal(signal.SIGTERM, lambda *_: node.stop())
    print(f"party {cfg.party_id} ready", flush=True)
    try:
        if args.headless:
            node.run_headless()
        else:
            node._stop.wait()
    except KeyboardInterrupt:
        pass
    finally:
        node.stop()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="copa", description="Four-party replicated-share multiplication "
                                 "with accelerator offload.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("keygen", help="write four key files (three PRF keys each)")
    p.add_argument("--out", default="keys")
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("deal", help="share secrets into per-party share files")
    p.add_argument("--values", type=_ints, required=True, help="comma-separated integers")
    p.add_argument("--out", default="shares")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_deal)

    def cost_args(q):
        q.add_argument("--clock", type=float, default=275.0, help="accelerator clock, MHz")
        q.add_argument("--cpe", type=float, default=2.0, help="cycles per element")
        q.add_argument("--startup", type=float, default=1.0, help="DMA startup, us")
        q.add_argument("--link", type=float, default=100.0, help="link bandwidth, Gb/s")

    p = sub.add_parser("saturate", help="accelerators needed to fill a link")
    cost_args(p)
    p.add_argument("--max-accels", type=int, default=8)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_saturate)

    p = sub.add_parser("bench", help="run verified multiply batches")
    cost_args(p)
    p.add_argument("--batch", dest="batches", type=_ints, help="batch size(s), comma-separated")
    p.add_argument("--sweep", action="store_true", help=f"batches {','.join(map(str, DEFAULT_SWEEP))}")
    p.add_argument("--mode", choices=[*MODES, "both"], default="base")
    p.add_argument("--transport", choices=["simulated", "sockets"], default="simulated")
    p.add_argument("--accels", type=int, default=1)
    p.add_argument("--latency", type=float, default=1.0, help="link latency, us")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="party config (sockets)")
    p.add_argument("--report", help="write <REPORT>.csv and <REPORT>.json")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("node", help="run a party daemon over TCP")
    p.add_argument("--config", required=True)
    p.add_argument("--headless", action="store_true", help="serve peers only, never originate")
    p.set_defaults(fn=cmd_node)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except VerificationFailed as err:
        print(f"verification failed: {err}", file=sys.stderr)
        return EXIT_VERIFY
    except (ConfigError, ShareError, FileNotFoundError, ValueError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
