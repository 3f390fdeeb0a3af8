import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from copampc.protocol import (TERMS, Mode, VerificationError, WireValue, add_batch, add_local, compute_tag,
                              ingress_terms, mul_stage1, mul_stage2, multiply, sender_terms, stage1_batch,
                              stage2_batch, tags_for, term_roles, verifier_terms)
from copampc.ring import MOD, DealtSecret, ShareError, deal, generate_keys, prf, reconstruct, to_bytes, view_of

# Independently enumerated: sender is the first party after a (cyclically) outside {a, b}.
EXPECTED_ROLES = {
    (0, 1): (2, 3), (0, 2): (1, 3), (0, 3): (1, 2),
    (1, 0): (2, 3), (1, 2): (3, 0), (1, 3): (2, 0),
    (2, 0): (3, 1), (2, 1): (3, 0), (2, 3): (0, 1),
    (3, 0): (1, 2), (3, 1): (0, 2), (3, 2): (0, 1),
}

KEYS = generate_keys(random.Random(0).randbytes)
ALL_MODES = [Mode.NONE, Mode.MASKING, Mode.MALICIOUS, Mode.MALICIOUS | Mode.MASKING]


def _views(d):
    return {p: view_of(d, p) for p in range(4)}


def test_term_roles_table():
    for (a, b), (s, v) in EXPECTED_ROLES.items():
        r = term_roles(a, b)
        assert (r.slot, r.receiver, r.sender, r.verifier) == (a, b, s, v)
    with pytest.raises(ValueError):
        term_roles(2, 2)


def test_term_roles_balance():
    roles = [term_roles(*t) for t in TERMS]
    for p in range(4):
        assert sum(r.sender == p for r in roles) == 3
        assert sum(r.receiver == p for r in roles) == 3
        assert sum(r.verifier == p for r in roles) == 3
    directed = [(s, d) for s in range(4) for d in range(4) if s != d]
    assert sorted((r.sender, r.receiver) for r in roles) == directed
    assert sorted((r.verifier, r.receiver) for r in roles) == directed
    for r in roles:
        assert {r.sender, r.verifier} == set(range(4)) - {r.a, r.b}


def test_canonical_orders():
    assert sender_terms(2) == ((0, 1), (1, 0), (1, 3))
    assert verifier_terms(3) == ((0, 1), (0, 2), (1, 0))
    assert ingress_terms(1) == ((0, 1), (2, 1), (3, 1))


def test_worked_example_stage1():
    x = _views(DealtSecret((5, 0, 0, 0)))
    y = _views(DealtSecret((0, 3, 0, 0)))
    out = {p: mul_stage1(x[p], y[p], KEYS[p], 0, 0, Mode.NONE) for p in range(4)}
    nonzero = [(p, w) for p, o in out.items() for w in o.egress if w.payload]
    assert nonzero == [(2, WireValue((0, 1), 15))]
    z = multiply(x, y, KEYS, mode=Mode.NONE)
    assert dict(z[1].held) == {0: 15, 2: 0, 3: 0}
    assert dict(z[0].held) == {1: 0, 2: 0, 3: 0}
    assert z[2][0] == z[3][0] == 15


def test_zero_inputs():
    zero = _views(DealtSecret((0, 0, 0, 0)))
    for p in range(4):
        o = mul_stage1(zero[p], zero[p], KEYS[p], 0, 0, Mode.NONE)
        assert all(w.payload == 0 for w in o.egress)
        assert set(o.local_acc.values()) == {0}
    # masked: payloads are exactly the PRF masks and still cancel
    o = mul_stage1(zero[2], zero[2], KEYS[2], 100, 3, Mode.MASKING)
    for w in o.egress:
        a, b = w.term
        assert w.payload == prf(KEYS[2][a], 100 + 16 * 3 + 4 * a + b)
    z = multiply(zero, zero, KEYS, ctr_base=100, element_index=3, mode=Mode.MASKING)
    assert all(set(v.held.values()) == {0} for v in z.values())


@pytest.mark.parametrize("mode", ALL_MODES)
def test_multiply_random(mode):
    rng = random.Random(int(mode))
    for i in range(50):
        sx, sy = rng.getrandbits(128), rng.getrandbits(128)
        dx, dy = deal(sx), deal(sy)
        z = multiply(_views(dx), _views(dy), KEYS, ctr_base=1 << 20, element_index=i, mode=mode, batch_id=9)
        for g in range(4):
            # slot identity z_g = x_g * y
            holders = [p for p in range(4) if p != g]
            assert {z[p][g] for p in holders} == {dx.slots[g] * sy % MOD}
        assert reconstruct(z[0], z[3]) == sx * sy % MOD


def test_batch_oracle_10k():
    rng = random.Random(11)
    n = 10_000
    sx = [rng.getrandbits(128) for _ in range(n)]
    sy = [rng.getrandbits(128) for _ in range(n)]
    dx = [deal(s, lambda: rng.getrandbits(128)) for s in sx]
    dy = [deal(s, lambda: rng.getrandbits(128)) for s in sy]
    mode = Mode.MASKING | Mode.MALICIOUS
    s1 = {}
    for p in range(4):
        xs = [view_of(d, p).values() for d in dx]
        ys = [view_of(d, p).values() for d in dy]
        s1[p] = stage1_batch(p, xs, ys, KEYS[p], 0, 0, mode)
    wires = {t: v for o in s1.values() for t, v in o.egress.items()}
    ver = {t: v for o in s1.values() for t, v in o.verified.items()}
    z = {}
    for p in range(4):
        terms = ingress_terms(p)
        tags = [tags_for(ver[t], 5, 0, *t) for t in terms]
        z[p] = stage2_batch(p, s1[p].local_acc, [wires[t] for t in terms], KEYS[p], 0, 0, mode, 5, tags)
    for i in range(n):
        assert (z[0][i][0] + z[1][i][0] + z[0][i][1] + z[0][i][2]) % MOD == sx[i] * sy[i] % MOD


def test_mask_cancellation():
    rng = random.Random(5)
    x, y = _views(deal(rng.getrandbits(128))), _views(deal(rng.getrandbits(128)))
    plain = {p: mul_stage1(x[p], y[p], KEYS[p], 0, 0, Mode.NONE) for p in range(4)}
    masked = {p: mul_stage1(x[p], y[p], KEYS[p], 0, 0, Mode.MASKING) for p in range(4)}
    for p in range(4):
        for u, v in zip(plain[p].egress, masked[p].egress):
            assert u.payload != v.payload
    assert multiply(x, y, KEYS, mode=Mode.NONE) == multiply(x, y, KEYS, mode=Mode.MASKING)


def _stage2_inputs(x, y, mode, p, batch_id=4, elem=0):
    s1 = {q: mul_stage1(x[q], y[q], KEYS[q], 0, elem, mode, batch_id) for q in range(4)}
    wires = {w.term: w for o in s1.values() for w in o.egress}
    tags = {t.term: t for o in s1.values() for t in o.tags}
    terms = ingress_terms(p)
    return s1[p].local_acc, [wires[t] for t in terms], [tags[t] for t in terms]


def test_every_payload_bit_flip_aborts():
    rng = random.Random(9)
    x, y = _views(deal(rng.getrandbits(128))), _views(deal(rng.getrandbits(128)))
    mode = Mode.MALICIOUS | Mode.MASKING
    for p in range(4):
        local, ingress, tags = _stage2_inputs(x, y, mode, p, elem=7)
        mul_stage2(p, local, ingress, tags, KEYS[p], 0, 7, mode, 4)
        for k, bit in itertools.product(range(3), range(128)):
            bad = list(ingress)
            bad[k] = WireValue(bad[k].term, bad[k].payload ^ (1 << bit))
            with pytest.raises(VerificationError) as err:
                mul_stage2(p, local, bad, tags, KEYS[p], 0, 7, mode, 4)
            assert err.value.element == 7 and err.value.term == bad[k].term


def test_add_local():
    u = DealtSecret((0, 1, 1, 1))
    v = DealtSecret((0, 2, 2, 2))
    assert dict(add_local(view_of(u, 0), view_of(v, 0)).held) == {1: 3, 2: 3, 3: 3}
    with pytest.raises(ShareError):
        add_local(view_of(u, 0), view_of(v, 1))
    s = random.getrandbits(128)
    x, z = deal(s), deal(0)
    assert reconstruct(add_local(view_of(x, 1), view_of(z, 1)), add_local(view_of(x, 2), view_of(z, 2))) == s


def test_add_oracle_10k():
    rng = random.Random(2)
    pairs = [(rng.getrandbits(128), rng.getrandbits(128)) for _ in range(10_000)]
    dx = [deal(a) for a, _ in pairs]
    dy = [deal(b) for _, b in pairs]
    z0 = add_batch([view_of(d, 0).values() for d in dx], [view_of(d, 0).values() for d in dy])
    z1 = add_batch([view_of(d, 1).values() for d in dx], [view_of(d, 1).values() for d in dy])
    for (a, b), u, v in zip(pairs, z0, z1):
        # party 0 holds slots 1,2,3; party 1 holds slot 0 first
        assert (v[0] + u[0] + u[1] + u[2]) % MOD == (a + b) % MOD


def test_mismatched_parties():
    d = deal(1)
    with pytest.raises(ShareError):
        mul_stage1(view_of(d, 0), view_of(d, 1), KEYS[0], 0, 0)
    with pytest.raises(ShareError):
        mul_stage1(view_of(d, 0), view_of(d, 0), KEYS[1], 0, 0)


def test_counter_overflow():
    d = deal(1)
    with pytest.raises(OverflowError):
        mul_stage1(view_of(d, 0), view_of(d, 0), KEYS[0], 2**64 - 8, 0)


def test_compute_tag():
    payload = to_bytes(12345)
    t = compute_tag(payload, 1, 2, 0, 1)
    assert len(t) == 8 and t == compute_tag(payload, 1, 2, 0, 1)
    assert t != compute_tag(payload, 1, 3, 0, 1)


@settings(max_examples=200)
@given(st.integers(0, 2**128 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 2),
       st.integers(0, 34 * 8 - 1))
def test_tag_single_bit_sensitivity(value, batch_id, element, bit):
    ctx = bytearray(to_bytes(value) + batch_id.to_bytes(8, "little") + element.to_bytes(8, "little") + bytes([0, 1]))
    base = compute_tag(bytes(ctx[:16]), batch_id, element, 0, 1)
    ctx[bit // 8] ^= 1 << (bit % 8)
    flipped = compute_tag(bytes(ctx[:16]), int.from_bytes(ctx[16:24], "little"),
                          int.from_bytes(ctx[24:32], "little"), ctx[32], ctx[33])
    assert flipped != base
