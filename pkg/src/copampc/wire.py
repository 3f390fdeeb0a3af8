"""Framing for fabric messages.

Every message is a 32-byte little-endian header followed by ``payload_len``
bytes, except GET, whose ``payload_len`` field carries the requested length
and which has no body::

    magic u32 | version u8 | type u8 | src u8 | dst u8 |
    batch_id u64 | offset u64 | payload_len u32 | reserved u32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = 0x434F5041  # b"APOC" on the wire
VERSION = 1
HEADER = struct.Struct("<IBBBBQQII")
HEADER_BYTES = HEADER.size
COMMAND_BYTES = 48
ABORT = struct.Struct("<IQ")
COMPLETION = struct.Struct("<QBBHd")


class MsgType(IntEnum):
    PUT = 1
    TRIGGER = 2
    TAGS = 3
    COMPLETION = 4
    ABORT = 5
    GET = 6


class AbortReason(IntEnum):
    TAG_MISMATCH = 1
    LINK_HASH_MISMATCH = 2
    BAD_RANGE = 3
    POISONED = 4
    REJECTED = 5
    TIMEOUT = 6


class FramingError(ValueError):
    pass


@dataclass(frozen=True)
class WireMessage:
    type: MsgType
    src: int
    dst: int
    batch_id: int = 0
    offset: int = 0
    payload: bytes = b""
    length: int = 0  # GET only: requested byte count

    @property
    def payload_len(self) -> int:
        return self.length if self.type == MsgType.GET else len(self.payload)

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.type, self.src, self.dst,
                           self.batch_id, self.offset, self.payload_len, 0)

    def encode(self) -> bytes:
        check_payload(self.type, self.payload_len if self.type != MsgType.GET else 0, self.payload)
        return self.header() + (b"" if self.type == MsgType.GET else bytes(self.payload))

    @property
    def wire_bytes(self) -> int:
        return HEADER_BYTES + len(self.payload)


def check_payload(mtype: MsgType, declared: int, payload: bytes) -> None:
    n = len(payload)
    if mtype == MsgType.GET:
        if n:
            raise FramingError("GET carries no body")
        return
    if n != declared:
        raise FramingError(f"{mtype.name}: payload_len {declared} but {n} bytes present")
    if mtype == MsgType.TRIGGER and n != COMMAND_BYTES:
        raise FramingError(f"TRIGGER payload must be {COMMAND_BYTES} bytes, got {n}")
    if mtype == MsgType.TAGS and n % 8:
        raise FramingError("TAGS payload must be a multiple of 8 bytes")
    if mtype == MsgType.ABORT and n != ABORT.size:
        raise FramingError(f"ABORT payload must be {ABORT.size} bytes")
    if mtype == MsgType.COMPLETION and n != COMPLETION.size:
        raise FramingError(f"COMPLETION payload must be {COMPLETION.size} bytes")


def decode_header(hdr: bytes) -> tuple[MsgType, int, int, int, int, int]:
    """Validate a header; returns (type, src, dst, batch_id, offset, payload_len)."""
    if len(hdr) != HEADER_BYTES:
        raise FramingError(f"header must be {HEADER_BYTES} bytes")
    magic, version, mtype, src, dst, batch_id, offset, plen, reserved = HEADER.unpack(hdr)
    if magic != MAGIC:
        raise FramingError(f"bad magic {magic:#010x}")
    if version != VERSION:
        raise FramingError(f"unsupported version {version}")
    if reserved:
        raise FramingError("reserved header field must be zero")
    try:
        mtype = MsgType(mtype)
    except ValueError:
        raise FramingError(f"unknown message type {mtype}") from None
    if src > 3 or dst > 3:
        raise FramingError(f"party index out of range: {src}->{dst}")
    return mtype, src, dst, batch_id, offset, plen


def body_length(mtype: MsgType, payload_len: int) -> int:
    return 0 if mtype == MsgType.GET else payload_len


def decode(buf: bytes) -> WireMessage:
    mtype, src, dst, batch_id, offset, plen = decode_header(bytes(buf[:HEADER_BYTES]))
    body = bytes(buf[HEADER_BYTES:])
    if len(body) != body_length(mtype, plen):
        raise FramingError(f"frame length mismatch: header says {plen}, body has {len(body)}")
    return build(mtype, src, dst, batch_id, offset, plen, body)


def build(mtype, src, dst, batch_id, offset, plen, body) -> WireMessage:
    check_payload(mtype, plen, body)
    if mtype == MsgType.GET:
        return WireMessage(mtype, src, dst, batch_id, offset, b"", plen)
    return WireMessage(mtype, src, dst, batch_id, offset, body)


def abort_payload(reason: AbortReason, element: int) -> bytes:
    return ABORT.pack(reason, element)


def parse_abort(payload: bytes) -> tuple[AbortReason, int]:
    reason, element = ABORT.unpack(payload)
    return AbortReason(reason), element


def completion_payload(ticket: int, opcode: int, status: int, time_us: float) -> bytes:
    return COMPLETION.pack(ticket, opcode, status, 0, time_us)


def parse_completion(payload: bytes) -> tuple[int, int, int, float]:
    ticket, opcode, status, _, t = COMPLETION.unpack(payload)
    return ticket, opcode, status, t
