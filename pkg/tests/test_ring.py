import hashlib
import random

import pytest
from hypothesis import given, strategies as st

from copampc import chacha
from copampc.ring import (MOD, DealtSecret, KeyMaterial, ReplicatedShareView, ShareError, deal,
                          generate_keys, missing_slot_for, pack, prf, prf_many, reconstruct, ring_add,
                          ring_mul, unpack, view_of)

ring = st.integers(min_value=0, max_value=MOD - 1)


def test_ring_add():
    assert ring_add(2, 3) == 5
    assert ring_add(MOD - 1, 1) == 0
    a = random.getrandbits(128)
    assert ring_add(a, 0) == a


def test_ring_mul():
    assert ring_mul(2, 3) == 6
    assert ring_mul(2**127, 2) == 0
    assert ring_mul(2**64 + 1, 2**64 - 1) == MOD - 1


@given(ring, ring)
def test_closed(a, b):
    for v in (ring_add(a, b), ring_mul(a, b)):
        assert 0 <= v < MOD


@given(st.lists(ring, max_size=20))
def test_pack_roundtrip(values):
    buf = pack(values)
    assert len(buf) == 16 * len(values)
    assert unpack(buf) == values
    assert buf == b"".join(v.to_bytes(16, "little") for v in values)


def test_deal_round_trip():
    d = deal(10)
    assert sum(d.slots) % MOD == 10
    assert deal(0, rand=lambda: 0).slots == (0, 0, 0, 0)


def test_deal_many():
    rng = random.Random(1)
    for _ in range(10_000):
        s = rng.getrandbits(128)
        d = deal(s, rand=lambda: rng.getrandbits(128))
        assert d.value == s
        assert reconstruct(view_of(d, 0), view_of(d, 1)) == s


def test_view_of():
    d = DealtSecret((1, 2, 3, 4))
    assert dict(view_of(d, 0).held) == {1: 2, 2: 3, 3: 4}
    assert dict(view_of(d, 3).held) == {0: 1, 1: 2, 2: 3}
    assert set(view_of(d, 0).held) | set(view_of(d, 1).held) == {0, 1, 2, 3}
    with pytest.raises(ShareError):
        view_of(d, 4)


def test_reconstruct():
    d = DealtSecret((1, 2, 3, 4))
    assert reconstruct(view_of(d, 0), view_of(d, 1)) == 10
    d = DealtSecret((MOD - 1, 1, 0, 0))
    assert reconstruct(view_of(d, 2), view_of(d, 3)) == 0


def test_reconstruct_errors():
    d = DealtSecret((1, 2, 3, 4))
    u = view_of(d, 0)
    bad = ReplicatedShareView(1, {0: 1, 2: 99, 3: 4})
    with pytest.raises(ShareError):
        reconstruct(u, bad)
    with pytest.raises(ShareError):
        reconstruct(u, u)


def test_view_must_hold_three_other_slots():
    with pytest.raises(ShareError):
        ReplicatedShareView(0, {0: 1, 1: 2, 2: 3})
    with pytest.raises(ShareError):
        ReplicatedShareView(0, {1: 1, 2: 2})


@given(ring)
def test_all_pairs_agree(s):
    d = deal(s)
    views = [view_of(d, p) for p in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert reconstruct(views[i], views[j]) == s


@given(ring, ring, st.integers(0, 3))
def test_three_slots_reveal_nothing(s, candidate, party):
    # for any claimed secret some missing-slot value is consistent with the view
    view = view_of(deal(s), party)
    slots = dict(view.held)
    slots[party] = missing_slot_for(view, candidate)
    assert sum(slots.values()) % MOD == candidate


def test_key_distribution():
    km = generate_keys()
    for p, k in km.items():
        assert p not in k.keys and len(k.keys) == 3
    for g in range(4):
        holders = [p for p, k in km.items() if g in k.keys]
        assert sorted(holders) == [q for q in range(4) if q != g]
        assert len({km[p][g] for p in holders}) == 1


def test_key_file_roundtrip(tmp_path):
    km = generate_keys()
    for p, k in km.items():
        path = tmp_path / f"party{p}.key"
        k.save(path)
        assert path.stat().st_size == 51
        assert KeyMaterial.load(path) == k
    with pytest.raises(ShareError):
        KeyMaterial.from_bytes(b"\x00" * 50)
    with pytest.raises(ShareError):
        KeyMaterial.from_bytes((b"\x01" + b"k" * 16) * 3)


# RFC 8439 section 2.3.2
RFC_KEY = bytes(range(32))
RFC_NONCE = bytes.fromhex("000000090000004a00000000")
RFC_BLOCK = bytes.fromhex(
    "10f1e7e4d13b5915500fdd1fa32071c4c7d1f4c733c068030422aa9ac3d46c4e"
    "d2826446079faa0914c2d705d98b02a2b5129cd1de164eb9cbd083e8a2503c4e")
# RFC 8439 appendix A.1, test vector 1
ZERO_BLOCK = bytes.fromhex(
    "76b8e0ada0f13d90405d6ae55386bd28bdd219b8a08ded1aa836efcc8b770dc7"
    "da41597c5157488d7724e03fb8d84a376a43b8f41518a11cc387b669b2ee6586")


def test_chacha_rfc_vectors():
    assert chacha.block(RFC_KEY, RFC_NONCE, 1) == RFC_BLOCK
    assert chacha.block(bytes(32), bytes(12), 0) == ZERO_BLOCK


def test_chacha_matches_cryptography():
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

    rng = random.Random(7)
    for _ in range(20):
        key = rng.randbytes(32)
        nonce = rng.randbytes(12)
        ctr = rng.getrandbits(32)
        enc = Cipher(algorithms.ChaCha20(key, ctr.to_bytes(4, "little") + nonce), mode=None).encryptor()
        assert chacha.keystream(key, nonce, 64, ctr) == enc.update(bytes(64))


def test_prf_construction():
    from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

    key = bytes(range(16))
    for ctr in (0, 1, 2**40 + 5, 2**64 - 1):
        full_nonce = (0).to_bytes(4, "little") + ctr.to_bytes(8, "little") + bytes(4)
        enc = Cipher(algorithms.ChaCha20(key + key, full_nonce), mode=None).encryptor()
        assert prf(key, ctr) == int.from_bytes(enc.update(bytes(16)), "little")


def test_prf_deterministic_and_distinct():
    rng = random.Random(3)
    for _ in range(10_000 // 100):
        key = rng.randbytes(16)
        ctrs = [rng.getrandbits(63) for _ in range(100)]
        a = prf_many(key, ctrs)
        b = prf_many(key, [c + 1 for c in ctrs])
        assert a == prf_many(key, ctrs)
        assert all(x != y for x, y in zip(a, b))
    key = rng.randbytes(16)
    assert prf(key, 5) == prf(key, 5)
    outs = prf_many(key, range(10_000))
    assert len(set(outs)) == 10_000
    with pytest.raises(ValueError):
        prf(key, 2**64)


def test_sha256_vectors():
    assert hashlib.sha256(b"abc").hexdigest() == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert hashlib.sha256(b"").hexdigest() == \
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
