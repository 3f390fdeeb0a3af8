"""ChaCha20 block function (RFC 8439), vectorized over many nonces with numpy.

Every lane of the batch runs an independent block with the same key and
block counter but its own 96-bit nonce, which is the shape the PRF needs:
one key, thousands of counters.
"""

from __future__ import annotations

import numpy as np

SIGMA = (0x61707865, 0x3320646E, 0x79622D32, 0x6B206574)

_QUARTER_ROUNDS = (
    (0, 4, 8, 12), (1, 5, 9, 13), (2, 6, 10, 14), (3, 7, 11, 15),
    (0, 5, 10, 15), (1, 6, 11, 12), (2, 7, 8, 13), (3, 4, 9, 14),
)


def _rotl(v: np.ndarray, n: int) -> np.ndarray:
    return (v << np.uint32(n)) | (v >> np.uint32(32 - n))


def _initial_state(key: bytes, counter: int, nonces: np.ndarray) -> list[np.ndarray]:
    if len(key) != 32:
        raise ValueError("ChaCha20 key must be 32 bytes")
    n = nonces.shape[0]
    words = np.frombuffer(key, dtype="<u4")
    state = [np.full(n, c, dtype=np.uint32) for c in SIGMA]
    state += [np.full(n, w, dtype=np.uint32) for w in words]
    state.append(np.full(n, counter & 0xFFFFFFFF, dtype=np.uint32))
    state += [np.ascontiguousarray(nonces[:, i], dtype=np.uint32) for i in range(3)]
    return state


def blocks(key: bytes, nonces: np.ndarray, counter: int = 0, words: int = 16) -> np.ndarray:
    """Run the block function for each row of ``nonces`` (shape ``(n, 3)``, uint32).

    Returns an ``(n, words)`` uint32 array holding the first ``words`` output
    words of each keystream block.
    """
    nonces = np.asarray(nonces, dtype=np.uint32).reshape(-1, 3)
    init = _initial_state(key, counter, nonces)
    s = [w.copy() for w in init]
    with np.errstate(over="ignore"):
        for _ in range(10):
            for a, b, c, d in _QUARTER_ROUNDS:
                s[a] += s[b]; s[d] = _rotl(s[d] ^ s[a], 16)
                s[c] += s[d]; s[b] = _rotl(s[b] ^ s[c], 12)
                s[a] += s[b]; s[d] = _rotl(s[d] ^ s[a], 8)
                s[c] += s[d]; s[b] = _rotl(s[b] ^ s[c], 7)
        out = np.empty((nonces.shape[0], words), dtype=np.uint32)
        for i in range(words):
            out[:, i] = s[i] + init[i]
    return out


def block(key: bytes, nonce: bytes, counter: int = 0) -> bytes:
    """Single 64-byte keystream block; the RFC 8439 calling convention."""
    if len(nonce) != 12:
        raise ValueError("ChaCha20 nonce must be 12 bytes")
    n = np.frombuffer(nonce, dtype="<u4").reshape(1, 3)
    return blocks(key, n, counter).astype("<u4").tobytes()


def keystream(key: bytes, nonce: bytes, length: int, counter: int = 0) -> bytes:
    out = bytearray()
    while len(out) < length:
        out += block(key, nonce, counter)
        counter += 1
    return bytes(out[:length])
