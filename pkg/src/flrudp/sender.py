"""Client-side transfer state machine.

Transitions are pure: each function takes a :class:`SenderSession` and an
event and returns the next session plus a list of actions for the driver
(simulator or socket loop) to carry out. Times are integer nanoseconds on
whatever clock the driver uses.
"""

from __future__ import annotations

import enum
from collections.abc import Mapping
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Union

from flrudp.errors import InvalidState
from flrudp.model_codec import ChunkSet, to_hex
from flrudp.wire_format import Frame, FrameKind, NodeAddress

DEFAULT_MAX_RETRIES = 3
RETRIES_EXHAUSTED = "RetriesExhausted"


class SenderState(enum.Enum):
    IDLE = "Idle"
    AWAITING_ACK = "AwaitingAck"
    DONE = "Done"
    FAILED = "Failed"


@dataclass(frozen=True)
class Emit:
    frame: Frame


@dataclass(frozen=True)
class StartTimer:
    duration: int


@dataclass(frozen=True)
class StopTimer:
    pass


@dataclass(frozen=True)
class Complete:
    pass


@dataclass(frozen=True)
class Fail:
    reason: str


SenderAction = Union[Emit, StartTimer, StopTimer, Complete, Fail]


@dataclass(frozen=True)
class SenderSession:
    self_addr: NodeAddress
    peer_addr: NodeAddress
    timeout: int
    retries_left: int = DEFAULT_MAX_RETRIES
    history: Mapping[int, Frame] = field(default_factory=lambda: MappingProxyType({}))
    np: int = 0
    timer_deadline: int | None = None
    state: SenderState = SenderState.IDLE

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("sender timeout must be positive")
        if self.retries_left < 0:
            raise ValueError("retry budget must be non-negative")


def new_session(
    self_addr: NodeAddress | str,
    peer_addr: NodeAddress | str,
    timeout: int,
    max_retries: int = DEFAULT_MAX_RETRIES,
) -> SenderSession:
    return SenderSession(NodeAddress(self_addr), NodeAddress(peer_addr), timeout, max_retries)


def _armed(session: SenderSession, now: int, **changes) -> tuple[SenderSession, StartTimer]:
    return (
        replace(session, timer_deadline=now + session.timeout, **changes),
        StartTimer(session.timeout),
    )


def begin_transfer(
    session: SenderSession, chunks: ChunkSet, now: int = 0
) -> tuple[SenderSession, list[SenderAction]]:
    """Burst-send every chunk as DATA ``(x, np, self)`` and start the response timer."""
    if session.state is not SenderState.IDLE:
        raise InvalidState(f"begin_transfer in state {session.state.value}")
    np_total = chunks.np
    history = {
        x: Frame.data(x, np_total, session.self_addr, to_hex(chunks.chunk(x)).encode("ascii"))
        for x in range(1, np_total + 1)
    }
    actions: list[SenderAction] = [Emit(history[x]) for x in range(1, np_total + 1)]
    session, start = _armed(
        session,
        now,
        history=MappingProxyType(history),
        np=np_total,
        state=SenderState.AWAITING_ACK,
    )
    actions.append(start)
    return session, actions


def on_frame(
    session: SenderSession, frame: Frame, now: int = 0
) -> tuple[SenderSession, list[SenderAction]]:
    if session.state in (SenderState.DONE, SenderState.FAILED):
        return session, []
    if session.state is not SenderState.AWAITING_ACK:
        raise InvalidState(f"frame received in state {session.state.value}")

    if frame.kind is FrameKind.COMPLETE_ACK:
        return (
            replace(session, state=SenderState.DONE, timer_deadline=None),
            [StopTimer(), Complete()],
        )
    if frame.kind is FrameKind.NACK and 1 <= frame.header.x <= session.np:
        # NACK-driven resends do not consume the retry budget.
        session, start = _armed(session, now)
        return session, [Emit(session.history[frame.header.x]), start]
    return session, []


def on_timeout(session: SenderSession, now: int = 0) -> tuple[SenderSession, list[SenderAction]]:
    """Timer expiry: resend the last packet, or give up once the budget is spent."""
    if session.state is not SenderState.AWAITING_ACK:
        raise InvalidState(f"timeout in state {session.state.value}")
    if session.retries_left == 0:
        return (
            replace(session, state=SenderState.FAILED, timer_deadline=None),
            [Fail(RETRIES_EXHAUSTED)],
        )
    session, start = _armed(session, now, retries_left=session.retries_left - 1)
    return session, [Emit(session.history[session.np]), start]
