"""Four-party arithmetic over replicated shares.

Multiplication expands ``x*y = sum_{a,b} x_a*y_b`` and assigns the cross
term ``(a, b)`` to output slot ``a``.  Diagonal terms are computed by all
three holders of slot ``a``.  An off-diagonal term can be computed by exactly
the two parties outside ``{a, b}``: one of them (the sender) transmits it to
party ``b``, which holds slot ``a`` but lacks ``y_b``; the other (the
verifier) sends a hash of the same value so the receiver can detect
tampering.  Every party ends up with ``z_g = x_g * y`` for its three slots
after a single exchange.

The batch functions below work on lists of per-element triples (the held
slots in ascending order) and are what the accelerator model calls; the
single-element functions wrap them.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntFlag
from typing import Sequence

import numpy as np

from .ring import (CTR_MAX, MASK, PARTIES, KeyMaterial, ReplicatedShareView, ShareError, held_slots,
                   pack, prf_many, to_bytes, unpack)

TAG_BYTES = 8
LINK_HASH_BYTES = 32
NO_ELEMENT = (1 << 64) - 1


class Mode(IntFlag):
    """Per-job protocol switches; bit values match the command ``flags`` byte."""

    NONE = 0
    MALICIOUS = 1
    MASKING = 2
    BATCHED_HASH = 4


DEFAULT_MODE = Mode.MASKING


class VerificationError(Exception):
    """A received payload failed its hash check; the batch must be aborted."""

    def __init__(self, batch_id: int, element: int | None, term: tuple[int, int]):
        self.batch_id = batch_id
        self.element = element
        self.term = term
        where = "link hash" if element is None else f"element {element}"
        super().__init__(f"tag mismatch in batch {batch_id}, {where}, term {term}")


@dataclass(frozen=True)
class TermRole:
    a: int
    b: int
    slot: int
    receiver: int
    sender: int
    verifier: int


def term_roles(a: int, b: int) -> TermRole:
    if a not in PARTIES or b not in PARTIES:
        raise ValueError(f"slot indices out of range: {(a, b)}")
    if a == b:
        raise ValueError("diagonal terms are computed locally and have no roles")
    sender = (a + 1) % 4
    if sender == b:
        sender = (a + 2) % 4
    (verifier,) = set(PARTIES) - {a, b, sender}
    return TermRole(a, b, slot=a, receiver=b, sender=sender, verifier=verifier)


TERMS = tuple((a, b) for a in PARTIES for b in PARTIES if a != b)
ROLES = {t: term_roles(*t) for t in TERMS}


def sender_terms(party: int) -> tuple[tuple[int, int], ...]:
    return tuple(t for t in TERMS if ROLES[t].sender == party)


def verifier_terms(party: int) -> tuple[tuple[int, int], ...]:
    return tuple(t for t in TERMS if ROLES[t].verifier == party)


def ingress_terms(party: int) -> tuple[tuple[int, int], ...]:
    """Terms delivered to ``party``, in canonical (ascending ``a``) order."""
    return tuple((a, party) for a in PARTIES if a != party)


def ingress_position(term: tuple[int, int]) -> int:
    return ingress_terms(term[1]).index(term)


def term_counter(ctr_base: int, element: int, a: int, b: int) -> int:
    return ctr_base + 16 * element + 4 * a + b


def check_counter_space(ctr_base: int, first_element: int, count: int) -> None:
    if ctr_base < 0 or first_element < 0 or count < 0:
        raise ValueError("counters and element indices are non-negative")
    if count and term_counter(ctr_base, first_element + count - 1, 3, 3) > CTR_MAX:
        raise OverflowError("PRF counter space exhausted for this job")


# --- hashing -----------------------------------------------------------------

_TAG_CTX = struct.Struct("<QQBB")


@dataclass(frozen=True)
class VerificationTag:
    term: tuple[int, int]
    tag: bytes


def compute_tag(payload: bytes, batch_id: int, element_index: int, a: int, b: int) -> bytes:
    """First 8 bytes of SHA-256(payload || batch_id || element || a || b)."""
    if len(payload) != 16:
        raise ValueError("tag payload must be a 16-byte ring element")
    return hashlib.sha256(payload + _TAG_CTX.pack(batch_id, element_index, a, b)).digest()[:TAG_BYTES]


def tags_for(payloads: Sequence[int], batch_id: int, first_element: int, a: int, b: int) -> bytes:
    buf = pack(payloads)
    sha = hashlib.sha256
    ctx = _TAG_CTX.pack
    return b"".join(
        sha(buf[16 * i:16 * i + 16] + ctx(batch_id, first_element + i, a, b)).digest()[:TAG_BYTES]
        for i in range(len(payloads)))


def link_hasher(batch_id: int, a: int, b: int):
    """Running SHA-256 over one link's whole batch (the batched-hash variant)."""
    return hashlib.sha256(struct.pack("<QBB", batch_id, a, b))


# --- batch kernels -------------------------------------------------------------

Triple = tuple[int, int, int]


def _masks(keys: KeyMaterial, term: tuple[int, int], ctr_base: int, first: int, n: int) -> list[int]:
    a, b = term
    ctrs = (np.uint64(ctr_base + 4 * a + b)
            + np.uint64(16) * np.arange(first, first + n, dtype=np.uint64))
    return prf_many(keys[a], ctrs)


def _term_payloads(party: int, term: tuple[int, int], xs: Sequence[Triple], ys: Sequence[Triple],
                   keys: KeyMaterial, ctr_base: int, first: int, mode: Mode) -> list[int]:
    a, b = term
    pos = held_slots(party)
    ia, ib = pos.index(a), pos.index(b)
    prods = [x[ia] * y[ib] for x, y in zip(xs, ys)]
    if mode & Mode.MASKING:
        masks = _masks(keys, term, ctr_base, first, len(xs))
        return [(p + m) & MASK for p, m in zip(prods, masks)]
    return [p & MASK for p in prods]


@dataclass
class BatchStageOne:
    local_acc: list[Triple]
    egress: dict[tuple[int, int], list[int]]      # sender terms -> payload per element
    verified: dict[tuple[int, int], list[int]]    # verifier terms -> payload per element


def stage1_batch(party: int, xs: Sequence[Triple], ys: Sequence[Triple], keys: KeyMaterial,
                 ctr_base: int, first_element: int, mode: Mode) -> BatchStageOne:
    if keys.owner != party:
        raise ShareError(f"key material of party {keys.owner} used by party {party}")
    check_counter_space(ctr_base, first_element, len(xs))
    local = []
    for x, y in zip(xs, ys):
        ysum = y[0] + y[1] + y[2]
        local.append(((x[0] * ysum) & MASK, (x[1] * ysum) & MASK, (x[2] * ysum) & MASK))
    egress = {t: _term_payloads(party, t, xs, ys, keys, ctr_base, first_element, mode)
              for t in sender_terms(party)}
    verified = {}
    if mode & Mode.MALICIOUS:
        verified = {t: _term_payloads(party, t, xs, ys, keys, ctr_base, first_element, mode)
                    for t in verifier_terms(party)}
    return BatchStageOne(local, egress, verified)


def stage2_batch(party: int, local_acc: Sequence[Triple], ingress: Sequence[Sequence[int]],
                 keys: KeyMaterial, ctr_base: int, first_element: int, mode: Mode, batch_id: int = 0,
                 tags: Sequence[bytes] | None = None) -> list[Triple]:
    """Combine intermediates with the three ingress planes (canonical order).

    With ``Mode.MALICIOUS`` set, ``tags`` holds one byte string per ingress
    plane: ``8*n`` bytes of per-element tags, or a 32-byte link hash when
    ``Mode.BATCHED_HASH`` is also set.  Verification happens before any
    output is produced.
    """
    if keys.owner != party:
        raise ShareError(f"key material of party {keys.owner} used by party {party}")
    n = len(local_acc)
    check_counter_space(ctr_base, first_element, n)
    terms = ingress_terms(party)
    if len(ingress) != 3 or any(len(plane) != n for plane in ingress):
        raise ValueError("stage 2 needs three ingress planes of one value per element")
    if mode & Mode.MALICIOUS:
        if tags is None or len(tags) != 3:
            raise ValueError("malicious mode requires three tag streams")
        for term, plane, got in zip(terms, ingress, tags):
            _verify_plane(term, plane, got, batch_id, first_element, mode)
    clear = []
    for term, plane in zip(terms, ingress):
        if mode & Mode.MASKING:
            masks = _masks(keys, term, ctr_base, first_element, n)
            clear.append([(w - m) & MASK for w, m in zip(plane, masks)])
        else:
            clear.append(list(plane))
    c0, c1, c2 = clear
    return [((l[0] + u) & MASK, (l[1] + v) & MASK, (l[2] + w) & MASK)
            for l, u, v, w in zip(local_acc, c0, c1, c2)]


def _verify_plane(term, plane, got, batch_id, first_element, mode):
    a, b = term
    if mode & Mode.BATCHED_HASH:
        h = link_hasher(batch_id, a, b)
        h.update(pack(plane))
        if h.digest() != bytes(got):
            raise VerificationError(batch_id, None, term)
        return
    expect = tags_for(plane, batch_id, first_element, a, b)
    got = bytes(got)
    if expect != got:
        for i in range(len(plane)):
            if expect[8 * i:8 * i + 8] != got[8 * i:8 * i + 8]:
                raise VerificationError(batch_id, first_element + i, term)
        raise VerificationError(batch_id, first_element, term)


# --- single-element API ----------------------------------------------------------

@dataclass(frozen=True)
class WireValue:
    term: tuple[int, int]
    payload: int


@dataclass(frozen=True)
class StageOneOutput:
    local_acc: dict[int, int]
    egress: list[WireValue]
    tags: list[VerificationTag]


def _same_party(*views: ReplicatedShareView | KeyMaterial) -> int:
    parties = {v.party if isinstance(v, ReplicatedShareView) else v.owner for v in views}
    if len(parties) != 1:
        raise ShareError(f"mismatched party indices {sorted(parties)}")
    return parties.pop()


def mul_stage1(x: ReplicatedShareView, y: ReplicatedShareView, keys: KeyMaterial, ctr_base: int,
               element_index: int, mode: Mode = DEFAULT_MODE, batch_id: int = 0) -> StageOneOutput:
    p = _same_party(x, y, keys)
    out = stage1_batch(p, [x.values()], [y.values()], keys, ctr_base, element_index, mode)
    local = dict(zip(held_slots(p), out.local_acc[0]))
    egress = [WireValue(t, v[0]) for t, v in out.egress.items()]
    tags = [VerificationTag(t, compute_tag(to_bytes(v[0]), batch_id, element_index, *t))
            for t, v in out.verified.items()]
    return StageOneOutput(local, egress, tags)


def mul_stage2(party: int, local_acc: dict[int, int], ingress: Sequence[WireValue],
               ingress_tags: Sequence[VerificationTag] | None, keys: KeyMaterial, ctr_base: int,
               element_index: int, mode: Mode = DEFAULT_MODE, batch_id: int = 0) -> ReplicatedShareView:
    if keys.owner != party:
        raise ShareError(f"mismatched party indices {party} and {keys.owner}")
    terms = ingress_terms(party)
    if tuple(w.term for w in ingress) != terms:
        raise ValueError(f"party {party} expects ingress terms {terms} in canonical order")
    tags = None
    if mode & Mode.MALICIOUS:
        if ingress_tags is None or tuple(t.term for t in ingress_tags) != terms:
            raise ValueError(f"party {party} expects tags for terms {terms}")
        tags = [t.tag for t in ingress_tags]
    local = [tuple(local_acc[g] for g in held_slots(party))]
    planes = [[w.payload] for w in ingress]
    (z,) = stage2_batch(party, local, planes, keys, ctr_base, element_index, mode, batch_id, tags)
    return ReplicatedShareView.from_values(party, z)


def add_local(x: ReplicatedShareView, y: ReplicatedShareView) -> ReplicatedShareView:
    p = _same_party(x, y)
    return ReplicatedShareView(p, {g: (x[g] + y[g]) & MASK for g in held_slots(p)})


def add_batch(xs: Sequence[Triple], ys: Sequence[Triple]) -> list[Triple]:
    return [((x[0] + y[0]) & MASK, (x[1] + y[1]) & MASK, (x[2] + y[2]) & MASK) for x, y in zip(xs, ys)]


def multiply(xs: dict[int, ReplicatedShareView], ys: dict[int, ReplicatedShareView],
             keys: dict[int, KeyMaterial], ctr_base: int = 0, element_index: int = 0,
             mode: Mode = DEFAULT_MODE, batch_id: int = 0) -> dict[int, ReplicatedShareView]:
    """Run one multiplication among all four parties with in-memory message passing."""
    s1 = {p: mul_stage1(xs[p], ys[p], keys[p], ctr_base, element_index, mode, batch_id) for p in PARTIES}
    wires = {w.term: w for out in s1.values() for w in out.egress}
    tags = {t.term: t for out in s1.values() for t in out.tags}
    result = {}
    for p in PARTIES:
        terms = ingress_terms(p)
        result[p] = mul_stage2(p, s1[p].local_acc, [wires[t] for t in terms],
                               [tags[t] for t in terms] if mode & Mode.MALICIOUS else None,
                               keys[p], ctr_base, element_index, mode, batch_id)
    return result


def triples(buf: bytes | memoryview) -> list[Triple]:
    vals = unpack(buf)
    return list(zip(vals[0::3], vals[1::3], vals[2::3]))


def pack_triples(rows: Sequence[Triple]) -> bytes:
    return pack(v for row in rows for v in row)
