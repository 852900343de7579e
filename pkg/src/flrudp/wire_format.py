"""Frame layout for every datagram of the protocol.

Layout (network byte order)::

    offset  size  field
    0       1     kind     0=DATA, 1=NACK, 2=COMPLETE_ACK
    1       4     x        sequence index
    5       4     np       total packet count
    9       4     addr     IPv4 octets of the node named in the tuple
    13      2     length   payload length in bytes
    15      n     payload  lowercase hex text (DATA only)

A frame is always ``15 + length`` bytes. One frame travels in one datagram.
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass
from ipaddress import IPv4Address

from flrudp.errors import MalformedFrame

NodeAddress = IPv4Address

HEADER_FMT = "!BII4sH"
HEADER_SIZE = struct.calcsize(HEADER_FMT)
MAX_SEQ = 0xFFFFFFFF
MAX_PAYLOAD = 0xFFFF

_HEX_RE = re.compile(rb"[0-9a-f]*")


class FrameKind(enum.IntEnum):
    DATA = 0
    NACK = 1
    COMPLETE_ACK = 2


@dataclass(frozen=True)
class SequenceHeader:
    """The ``(x, np, addr)`` tuple carried by every frame."""

    x: int
    np: int
    addr: NodeAddress

    def __str__(self) -> str:
        return f"({self.x}, {self.np}, {self.addr})"


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    header: SequenceHeader
    payload: bytes = b""

    def __post_init__(self) -> None:
        _check_invariants(self.kind, self.header, self.payload)

    @classmethod
    def data(cls, x: int, np: int, addr: NodeAddress | str, payload: bytes) -> "Frame":
        return cls(FrameKind.DATA, SequenceHeader(x, np, IPv4Address(addr)), payload)

    @classmethod
    def nack(cls, x: int, np: int, addr: NodeAddress | str) -> "Frame":
        return cls(FrameKind.NACK, SequenceHeader(x, np, IPv4Address(addr)))

    @classmethod
    def complete_ack(cls, addr: NodeAddress | str) -> "Frame":
        return cls(FrameKind.COMPLETE_ACK, SequenceHeader(0, 0, IPv4Address(addr)))

    @property
    def seq_tuple(self) -> tuple[int, int, str]:
        return (self.header.x, self.header.np, str(self.header.addr))


def _check_invariants(kind: FrameKind, header: SequenceHeader, payload: bytes) -> None:
    if not isinstance(kind, FrameKind):
        raise MalformedFrame(f"unknown frame kind {kind!r}")
    if not isinstance(header.addr, IPv4Address):
        raise MalformedFrame("address must be IPv4")
    x, np = header.x, header.np
    if not (0 <= x <= MAX_SEQ and 0 <= np <= MAX_SEQ):
        raise MalformedFrame(f"sequence fields out of 32-bit range: ({x}, {np})")
    if kind is FrameKind.COMPLETE_ACK:
        if x != 0 or np != 0:
            raise MalformedFrame(f"COMPLETE_ACK must carry (0, 0), got ({x}, {np})")
    elif not (np >= 1 and 1 <= x <= np):
        raise MalformedFrame(f"{kind.name} requires 1 <= x <= np, got ({x}, {np})")
    if kind is FrameKind.DATA:
        if not payload:
            raise MalformedFrame("DATA frame with empty payload")
        if len(payload) > MAX_PAYLOAD:
            raise MalformedFrame(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
        if len(payload) % 2 or _HEX_RE.fullmatch(payload) is None:
            raise MalformedFrame("DATA payload is not lowercase hex text")
    elif payload:
        raise MalformedFrame(f"{kind.name} frame must have an empty payload")


def encode_frame(frame: Frame) -> bytes:
    h = frame.header
    return (
        struct.pack(HEADER_FMT, frame.kind, h.x, h.np, h.addr.packed, len(frame.payload))
        + frame.payload
    )


def decode_frame(data: bytes) -> Frame:
    """Parse one datagram. Raises :class:`MalformedFrame` for anything invalid."""
    if len(data) < HEADER_SIZE:
        raise MalformedFrame(f"datagram of {len(data)} bytes is shorter than the header")
    kind_byte, x, np, octets, length = struct.unpack_from(HEADER_FMT, data)
    if len(data) - HEADER_SIZE != length:
        raise MalformedFrame(
            f"declared payload length {length} but {len(data) - HEADER_SIZE} bytes follow"
        )
    try:
        kind = FrameKind(kind_byte)
    except ValueError:
        raise MalformedFrame(f"unknown kind byte {kind_byte}") from None
    return Frame(kind, SequenceHeader(x, np, IPv4Address(octets)), bytes(data[HEADER_SIZE:]))
