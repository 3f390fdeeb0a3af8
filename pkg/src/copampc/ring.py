"""Arithmetic over Z/2^128, 3-of-4 replicated sharing, and the keyed PRF.

A secret ``s`` is dealt as four additive slots ``s = x0 + x1 + x2 + x3``
(mod 2^128).  Party ``p`` holds every slot except slot ``p``, so any two
distinct parties jointly see all four slots while any single party is
missing exactly one.

Ring elements are plain Python ints kept in ``[0, 2**128)``; they are
serialized as 16 bytes little-endian everywhere.
"""

from __future__ import annotations

import os
import secrets as _secrets
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import chacha

BITS = 128
MOD = 1 << BITS
MASK = MOD - 1
ELEMENT_BYTES = 16
NUM_PARTIES = 4
PARTIES = tuple(range(NUM_PARTIES))
KEY_BYTES = 16
CTR_MAX = (1 << 64) - 1


class ShareError(ValueError):
    """Raised on inconsistent or malformed share views."""


def ring_add(a: int, b: int) -> int:
    return (a + b) & MASK


def ring_sub(a: int, b: int) -> int:
    return (a - b) & MASK


def ring_mul(a: int, b: int) -> int:
    return (a * b) & MASK


def to_bytes(value: int) -> bytes:
    return (value & MASK).to_bytes(ELEMENT_BYTES, "little")


def from_bytes(data: bytes) -> int:
    if len(data) != ELEMENT_BYTES:
        raise ValueError(f"ring element needs {ELEMENT_BYTES} bytes, got {len(data)}")
    return int.from_bytes(data, "little")


def pack(values: Iterable[int]) -> bytes:
    """Serialize a sequence of ring elements as consecutive 16-byte LE words."""
    values = list(values)
    arr = np.empty(2 * len(values), dtype="<u8")
    arr[0::2] = [v & 0xFFFFFFFFFFFFFFFF for v in values]
    arr[1::2] = [(v >> 64) & 0xFFFFFFFFFFFFFFFF for v in values]
    return arr.tobytes()


def unpack(data: bytes | bytearray | memoryview) -> list[int]:
    if len(data) % ELEMENT_BYTES:
        raise ValueError("buffer length is not a multiple of 16")
    arr = np.frombuffer(data, dtype="<u8")
    return [lo | (hi << 64) for lo, hi in zip(arr[0::2].tolist(), arr[1::2].tolist())]


def check_party(party: int) -> int:
    if party not in PARTIES:
        raise ShareError(f"invalid party index {party!r}")
    return party


def held_slots(party: int) -> tuple[int, ...]:
    """Slots held by ``party``, ascending."""
    check_party(party)
    return tuple(g for g in PARTIES if g != party)


@dataclass(frozen=True)
class DealtSecret:
    slots: tuple[int, int, int, int]

    def __post_init__(self):
        if len(self.slots) != NUM_PARTIES:
            raise ShareError("a dealing has exactly 4 slots")

    @property
    def value(self) -> int:
        return sum(self.slots) & MASK


@dataclass(frozen=True)
class ReplicatedShareView:
    """One party's holding: the three slots other than its own index."""

    party: int
    held: Mapping[int, int]

    def __post_init__(self):
        check_party(self.party)
        if set(self.held) != set(held_slots(self.party)):
            raise ShareError(
                f"party {self.party} must hold exactly slots {held_slots(self.party)}, got {sorted(self.held)}")

    def __getitem__(self, slot: int) -> int:
        return self.held[slot]

    def values(self) -> tuple[int, int, int]:
        """Held slot values in ascending slot order (the 48-byte record order)."""
        return tuple(self.held[g] for g in held_slots(self.party))

    def to_bytes(self) -> bytes:
        return pack(self.values())

    @classmethod
    def from_values(cls, party: int, values: Sequence[int]) -> "ReplicatedShareView":
        return cls(party, dict(zip(held_slots(party), (v & MASK for v in values))))

    @classmethod
    def from_bytes(cls, party: int, record: bytes) -> "ReplicatedShareView":
        if len(record) != 3 * ELEMENT_BYTES:
            raise ShareError("share record must be 48 bytes")
        return cls.from_values(party, unpack(record))


RandomSource = Callable[[], int]


def system_random() -> int:
    return _secrets.randbits(BITS)


def deal(secret: int, rand: RandomSource = system_random) -> DealtSecret:
    """Split ``secret`` into four additive slots; slots 1..3 random, slot 0 solved."""
    r1, r2, r3 = (rand() & MASK for _ in range(3))
    x0 = (secret - r1 - r2 - r3) & MASK
    return DealtSecret((x0, r1, r2, r3))


def view_of(dealt: DealtSecret, party: int) -> ReplicatedShareView:
    check_party(party)
    return ReplicatedShareView(party, {g: dealt.slots[g] for g in held_slots(party)})


def view_records(dealt: Sequence[DealtSecret], party: int) -> bytes:
    """``party``'s 48-byte records for a run of dealings, packed in one pass."""
    held = held_slots(party)
    return pack([d.slots[g] for d in dealt for g in held])


def reconstruct(u: ReplicatedShareView, v: ReplicatedShareView) -> int:
    """Recover the secret from two distinct parties' views.

    Common slots must agree; a disagreement means at least one view was
    corrupted.
    """
    if u.party == v.party:
        raise ShareError("reconstruction needs views from two distinct parties")
    slots = dict(u.held)
    for g, val in v.held.items():
        if g in slots and slots[g] != val:
            raise ShareError(f"views of parties {u.party} and {v.party} disagree on slot {g}")
        slots[g] = val
    return sum(slots.values()) & MASK


def missing_slot_for(view: ReplicatedShareView, candidate: int) -> int:
    """The value slot ``view.party`` would need for the secret to be ``candidate``."""
    return (candidate - sum(view.held.values())) & MASK


# --- keys and PRF -----------------------------------------------------------

@dataclass(frozen=True)
class KeyMaterial:
    """Party ``owner`` holds K_g for every g != owner and never K_owner."""

    owner: int
    keys: Mapping[int, bytes] = field(repr=False)

    def __post_init__(self):
        check_party(self.owner)
        if set(self.keys) != set(held_slots(self.owner)):
            raise ShareError(f"party {self.owner} must hold keys {held_slots(self.owner)}, got {sorted(self.keys)}")
        for k in self.keys.values():
            if len(k) != KEY_BYTES:
                raise ShareError("keys are 16 bytes")

    def __getitem__(self, slot: int) -> bytes:
        try:
            return self.keys[slot]
        except KeyError:
            raise ShareError(f"party {self.owner} does not hold K_{slot}") from None

    def to_bytes(self) -> bytes:
        return b"".join(bytes([g]) + self.keys[g] for g in held_slots(self.owner))

    @classmethod
    def from_bytes(cls, data: bytes) -> "KeyMaterial":
        rec = 1 + KEY_BYTES
        if len(data) != 3 * rec:
            raise ShareError(f"key file must hold 3 records of {rec} bytes, got {len(data)} bytes")
        keys = {}
        for i in range(3):
            g = data[i * rec]
            if g in keys:
                raise ShareError(f"duplicate key slot {g}")
            keys[g] = bytes(data[i * rec + 1:(i + 1) * rec])
        missing = set(PARTIES) - set(keys)
        if len(missing) != 1:
            raise ShareError(f"malformed key file: slots {sorted(keys)}")
        return cls(missing.pop(), keys)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "KeyMaterial":
        return cls.from_bytes(Path(path).read_bytes())


def generate_keys(rand_bytes: Callable[[int], bytes] = os.urandom) -> dict[int, KeyMaterial]:
    """Draw K_0..K_3 and hand each party the three keys it is entitled to."""
    master = {g: rand_bytes(KEY_BYTES) for g in PARTIES}
    return {p: KeyMaterial(p, {g: master[g] for g in held_slots(p)}) for p in PARTIES}


def _chacha_key(key: bytes) -> bytes:
    if len(key) != KEY_BYTES:
        raise ValueError("PRF keys are 16 bytes")
    return key + key


def _nonces(ctrs: np.ndarray) -> np.ndarray:
    ctrs = np.asarray(ctrs, dtype=np.uint64)
    out = np.zeros((ctrs.shape[0], 3), dtype=np.uint32)
    out[:, 0] = (ctrs & np.uint64(0xFFFFFFFF)).astype(np.uint32)
    out[:, 1] = (ctrs >> np.uint64(32)).astype(np.uint32)
    return out


def prf_many(key: bytes, ctrs: Sequence[int] | np.ndarray) -> list[int]:
    """Vectorized :func:`prf` over many counters under one key."""
    ctrs = np.asarray(ctrs, dtype=np.uint64).reshape(-1)
    if ctrs.size == 0:
        return []
    words = chacha.blocks(_chacha_key(key), _nonces(ctrs), counter=0, words=4).astype("<u4")
    return unpack(words.tobytes())


def prf(key: bytes, ctr: int) -> int:
    """128-bit PRF output: the first 16 keystream bytes of ChaCha20 under
    key ``key || key``, block counter 0, nonce ``ctr`` (u64 LE) padded with zeros.
    """
    if not 0 <= ctr <= CTR_MAX:
        raise ValueError("PRF counter must fit in 64 bits")
    return prf_many(key, [ctr])[0]
