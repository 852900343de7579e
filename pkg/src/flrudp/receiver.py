"""Server-side reassembly state machine and the per-client session router."""

from __future__ import annotations

import enum
import hashlib
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Union

from flrudp.errors import InvalidHex, InvalidState, TotalMismatch, UnknownTotal
from flrudp.model_codec import from_hex, reassemble
from flrudp.sender import DEFAULT_MAX_RETRIES, Emit
from flrudp.wire_format import Frame, FrameKind, NodeAddress

log = logging.getLogger(__name__)


class ReceiverState(enum.Enum):
    COLLECTING = "Collecting"
    RECOVERING = "Recovering"
    COMPLETE = "Complete"


@dataclass(frozen=True)
class StartNackTimer:
    duration: int


@dataclass(frozen=True)
class StopNackTimer:
    pass


@dataclass(frozen=True)
class DeliverModel:
    data: bytes
    client: NodeAddress


@dataclass(frozen=True)
class Evict:
    client: NodeAddress


ReceiverAction = Union[Emit, StartNackTimer, StopNackTimer, DeliverModel, Evict]


@dataclass(frozen=True)
class ReceiverBuffer:
    client_addr: NodeAddress
    server_addr: NodeAddress
    nack_timeout: int
    nack_retries_left: int = DEFAULT_MAX_RETRIES
    np: int = 0
    received: Mapping[int, bytes] = field(default_factory=lambda: MappingProxyType({}))
    nack_timer_deadline: int | None = None
    state: ReceiverState = ReceiverState.COLLECTING


def missing_set(buffer: ReceiverBuffer) -> list[int]:
    if buffer.np == 0:
        raise UnknownTotal(f"no frame from {buffer.client_addr} has fixed the packet total")
    return [x for x in range(1, buffer.np + 1) if x not in buffer.received]


def _nacks(buffer: ReceiverBuffer, missing: list[int], now: int) -> tuple[ReceiverBuffer, list]:
    actions: list[ReceiverAction] = [
        Emit(Frame.nack(m, buffer.np, buffer.server_addr)) for m in missing
    ]
    actions.append(StartNackTimer(buffer.nack_timeout))
    return (
        replace(buffer, state=ReceiverState.RECOVERING, nack_timer_deadline=now + buffer.nack_timeout),
        actions,
    )


def on_frame(
    buffer: ReceiverBuffer, frame: Frame, now: int = 0
) -> tuple[ReceiverBuffer, list[ReceiverAction]]:
    """Store one DATA frame and, on the last packet or during recovery, check completeness.

    Raises :class:`TotalMismatch` when the frame's packet total contradicts the
    established one; the caller must abandon the transfer.
    """
    if frame.kind is not FrameKind.DATA or buffer.state is ReceiverState.COMPLETE:
        return buffer, []
    if frame.header.addr != buffer.client_addr:
        raise ValueError(f"frame from {frame.header.addr} routed to buffer of {buffer.client_addr}")
    x, np_total = frame.header.x, frame.header.np
    if buffer.np and np_total != buffer.np:
        raise TotalMismatch(f"{buffer.client_addr}: np changed from {buffer.np} to {np_total}")
    try:
        chunk = from_hex(frame.payload)
    except InvalidHex:
        log.debug("ignoring DATA %s with undecodable payload", frame.header)
        return buffer, []

    received = dict(buffer.received)
    received[x] = chunk
    buffer = replace(buffer, np=np_total, received=MappingProxyType(received))

    last = x == np_total
    if not last and buffer.state is not ReceiverState.RECOVERING:
        return buffer, []
    missing = missing_set(buffer)
    if not missing:
        data = reassemble(buffer.received, buffer.np)
        done = replace(buffer, state=ReceiverState.COMPLETE, nack_timer_deadline=None)
        return done, [
            DeliverModel(data, buffer.client_addr),
            Emit(Frame.complete_ack(buffer.server_addr)),
            StopNackTimer(),
            Evict(buffer.client_addr),
        ]
    if last:
        return _nacks(buffer, missing, now)
    # Recovered a non-last packet with others still outstanding: the NACKs for
    # those are already in flight and the NACK timer covers their loss.
    return buffer, []


def on_nack_timeout(buffer: ReceiverBuffer, now: int = 0) -> tuple[ReceiverBuffer, list[ReceiverAction]]:
    if buffer.state is not ReceiverState.RECOVERING:
        raise InvalidState(f"NACK timeout in state {buffer.state.value}")
    if buffer.nack_retries_left == 0:
        return replace(buffer, nack_timer_deadline=None), [Evict(buffer.client_addr)]
    buffer = replace(buffer, nack_retries_left=buffer.nack_retries_left - 1)
    return _nacks(buffer, missing_set(buffer), now)


@dataclass(frozen=True)
class _Tombstone:
    np: int
    digests: tuple[bytes, ...]
    expires: int

    def matches(self, frame: Frame) -> bool:
        h = frame.header
        if h.np != self.np:
            return False
        try:
            return _digest(from_hex(frame.payload)) == self.digests[h.x - 1]
        except InvalidHex:
            return False


def _digest(chunk: bytes) -> bytes:
    return hashlib.blake2b(chunk, digest_size=16).digest()


class SessionRouter:
    """Owns one :class:`ReceiverBuffer` per client address.

    After a transfer completes its storage is cleared, but chunk digests are
    kept for ``linger`` time units. A retransmission of an already-delivered
    chunk in that window (the sender missed the completion ack) is answered
    with a fresh completion ack instead of starting a duplicate transfer.
    """

    def __init__(
        self,
        server_addr: NodeAddress | str,
        nack_timeout: int,
        max_retries: int = DEFAULT_MAX_RETRIES,
        linger: int = 0,
    ) -> None:
        self.server_addr = NodeAddress(server_addr)
        self.nack_timeout = nack_timeout
        self.max_retries = max_retries
        self.linger = linger
        self.buffers: dict[NodeAddress, ReceiverBuffer] = {}
        self._completed: dict[NodeAddress, _Tombstone] = {}

    def route(self, frame: Frame) -> ReceiverBuffer:
        addr = frame.header.addr
        buf = self.buffers.get(addr)
        if buf is None:
            buf = ReceiverBuffer(addr, self.server_addr, self.nack_timeout, self.max_retries)
            self.buffers[addr] = buf
        return buf

    def handle_frame(self, frame: Frame, now: int = 0) -> list[ReceiverAction]:
        if frame.kind is not FrameKind.DATA:
            return []
        addr = frame.header.addr
        tomb = self._completed.get(addr)
        if tomb is not None:
            if now < tomb.expires and tomb.matches(frame):
                return [Emit(Frame.complete_ack(self.server_addr))]
            del self._completed[addr]

        buf = self.route(frame)
        try:
            buf, actions = on_frame(buf, frame, now)
        except TotalMismatch as exc:
            log.warning("aborting transfer: %s", exc)
            del self.buffers[addr]
            return [StopNackTimer(), Evict(addr)]
        self.buffers[addr] = buf
        self._apply(buf, actions, now)
        return actions

    def handle_nack_timeout(self, client: NodeAddress, now: int = 0) -> list[ReceiverAction]:
        buf = self.buffers.get(client)
        if buf is None or buf.state is not ReceiverState.RECOVERING:
            return []
        buf, actions = on_nack_timeout(buf, now)
        self.buffers[client] = buf
        self._apply(buf, actions, now)
        return actions

    def _apply(self, buf: ReceiverBuffer, actions: list[ReceiverAction], now: int) -> None:
        for action in actions:
            if isinstance(action, DeliverModel) and self.linger > 0:
                self._completed[buf.client_addr] = _Tombstone(
                    buf.np,
                    tuple(_digest(buf.received[x]) for x in range(1, buf.np + 1)),
                    now + self.linger,
                )
            elif isinstance(action, Evict):
                self.buffers.pop(action.client, None)
