"""Drive the sender and receiver state machines over real UDP sockets.

This module only moves bytes, reads the monotonic clock, and interprets FSM
actions; all protocol decisions live in :mod:`flrudp.sender` and
:mod:`flrudp.receiver`. One frame is sent per datagram.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from ipaddress import IPv4Address
from pathlib import Path

from flrudp import receiver, sender
from flrudp.aggregation import GlobalModelStore, apply_round, has_nonfinite
from flrudp.errors import BindFailure, EmptyModel, MalformedFrame, MalformedModel, ShapeMismatch
from flrudp.model_codec import (
    ModelParameters,
    chunk_model,
    chunk_size_for,
    deserialize_model,
    save_model,
    serialize_model,
)
from flrudp.trace import Tracer
from flrudp.wire_format import Frame, FrameKind, decode_frame, encode_frame

log = logging.getLogger(__name__)

DEFAULT_PORT = 9099
MAX_DATAGRAM = 65535
MS = 1_000_000

COMPLETED = "Completed"
FAILED = "Failed"
IO_ERROR = "IoError"


@dataclass(frozen=True)
class EndpointConfig:
    """Socket endpoints plus protocol timing; durations are in nanoseconds.

    ``node_addr`` is the IPv4 address written into frame headers for this
    endpoint and ``peer_node`` the one expected from the peer. Both default to
    the socket addresses (``127.0.0.1`` when bound to the wildcard).
    """

    bind_host: str = "0.0.0.0"
    bind_port: int = 0
    peer_host: str = "127.0.0.1"
    peer_port: int = DEFAULT_PORT
    node_addr: str | None = None
    peer_node: str | None = None
    poll_interval: float = 0.05
    sender_timeout: int = 5000 * MS
    nack_timeout: int = 5000 * MS
    max_retries: int = 3
    chunk_size: int = 1024
    target_chunks: int | None = None
    linger: int | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.bind_port <= 65535 or not 1 <= self.peer_port <= 65535:
            raise ValueError("ports must be in 1-65535 (bind port 0 picks an ephemeral port)")
        if self.poll_interval <= 0 or self.sender_timeout <= 0 or self.nack_timeout <= 0:
            raise ValueError("timing parameters must be positive")
        if self.max_retries < 0 or self.chunk_size < 1:
            raise ValueError("max_retries must be >= 0 and chunk_size >= 1")

    @property
    def node(self) -> IPv4Address:
        if self.node_addr:
            return IPv4Address(self.node_addr)
        host = socket.gethostbyname(self.bind_host)
        return IPv4Address("127.0.0.1" if host == "0.0.0.0" else host)

    @property
    def peer(self) -> IPv4Address:
        return IPv4Address(self.peer_node or socket.gethostbyname(self.peer_host))

    @property
    def effective_linger(self) -> int:
        if self.linger is not None:
            return self.linger
        return (self.max_retries + 1) * self.sender_timeout + self.nack_timeout


@dataclass(frozen=True)
class TransferOutcome:
    status: str
    reason: str | None = None

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


class _Clock:
    def __init__(self) -> None:
        self._t0 = time.monotonic_ns()

    def __call__(self) -> int:
        return time.monotonic_ns() - self._t0


def _bind(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind((host, port))
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    return sock


class UdpServer:
    """Receives model uploads and folds each delivered model into the global store."""

    def __init__(
        self,
        config: EndpointConfig,
        store: GlobalModelStore,
        model_out: str | Path | None = None,
        tracer: Tracer | None = None,
    ) -> None:
        self.config = config
        self.store = store
        self.model_out = model_out
        self.tracer = tracer if tracer is not None else Tracer()
        self.node = config.node
        self.router = receiver.SessionRouter(
            self.node, config.nack_timeout, config.max_retries, config.effective_linger
        )
        self.sock = _bind(config.bind_host, config.bind_port)
        self.clock = _Clock()
        self._stop = threading.Event()
        self._endpoints: dict[IPv4Address, tuple[str, int]] = {}
        self._nack_deadlines: dict[IPv4Address, int] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def shutdown(self) -> None:
        self._stop.set()

    def close(self) -> None:
        self.sock.close()

    def serve_forever(self) -> GlobalModelStore:
        try:
            while not self._stop.is_set():
                self.poll_once()
        finally:
            self.close()
        return self.store

    def poll_once(self) -> None:
        timeout = self.config.poll_interval
        if self._nack_deadlines:
            wait = (min(self._nack_deadlines.values()) - self.clock()) / 1e9
            timeout = max(0.0, min(timeout, wait))
        self.sock.settimeout(timeout)
        try:
            data, src = self.sock.recvfrom(MAX_DATAGRAM)
        except (socket.timeout, ConnectionRefusedError):
            pass
        else:
            self._on_datagram(data, src)
        self._fire_nack_timers()

    def _on_datagram(self, data: bytes, src: tuple[str, int]) -> None:
        now = self.clock()
        try:
            frame = decode_frame(data)
        except MalformedFrame as exc:
            log.debug("dropping malformed datagram from %s: %s", src, exc)
            return
        if frame.kind is not FrameKind.DATA:
            return
        client = frame.header.addr
        self._endpoints[client] = src
        self.tracer.frame(now, str(self.node), "rx", frame, peer=str(client))
        self._interpret(client, self.router.handle_frame(frame, now))

    def _fire_nack_timers(self) -> None:
        now = self.clock()
        due = sorted((d, str(c), c) for c, d in self._nack_deadlines.items() if d <= now)
        for _, _, client in due:
            del self._nack_deadlines[client]
            self.tracer.event(now, str(self.node), "nack_timeout", addr=str(client))
            self._interpret(client, self.router.handle_nack_timeout(client, now))

    def _interpret(self, client: IPv4Address, actions: list) -> None:
        for a in actions:
            now = self.clock()
            if isinstance(a, sender.Emit):
                self._send(client, a.frame, now)
            elif isinstance(a, receiver.StartNackTimer):
                self._nack_deadlines[client] = now + a.duration
            elif isinstance(a, receiver.StopNackTimer):
                self._nack_deadlines.pop(client, None)
            elif isinstance(a, receiver.DeliverModel):
                self._aggregate(client, a.data, now)
            elif isinstance(a, receiver.Evict):
                self._nack_deadlines.pop(client, None)
                self.tracer.event(now, str(self.node), "evict", addr=str(client))

    def _send(self, client: IPv4Address, frame: Frame, now: int) -> None:
        self.tracer.frame(now, str(self.node), "tx", frame, peer=str(client))
        try:
            self.sock.sendto(encode_frame(frame), self._endpoints[client])
        except OSError as exc:
            log.warning("send to %s failed: %s", client, exc)

    def _aggregate(self, client: IPv4Address, data: bytes, now: int) -> None:
        node = str(self.node)
        self.tracer.event(now, node, "deliver", addr=str(client))
        try:
            params = deserialize_model(data)
            if has_nonfinite(params):
                self.tracer.event(now, node, "nonfinite_warning", addr=str(client))
            self.store = apply_round(self.store, params, now, str(client))
        except (MalformedModel, ShapeMismatch) as exc:
            log.warning("rejecting model from %s: %s", client, exc)
            self.tracer.event(now, node, "aggregate_rejected", addr=str(client))
            return
        self.tracer.event(now, node, "aggregate", addr=str(client))
        if self.model_out is not None:
            try:
                save_model(self.model_out, self.store.current)
            except OSError as exc:
                log.error("could not persist global model to %s: %s", self.model_out, exc)


def serve(
    config: EndpointConfig,
    store: GlobalModelStore,
    stop: threading.Event | None = None,
    model_out: str | Path | None = None,
    tracer: Tracer | None = None,
) -> GlobalModelStore:
    """Serve until ``stop`` is set (or KeyboardInterrupt); returns the final global model store."""
    server = UdpServer(config, store, model_out, tracer)
    if stop is not None:
        threading.Thread(target=lambda: (stop.wait(), server.shutdown()), daemon=True).start()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        log.info("shutting down")
    return server.store


def send_model(
    config: EndpointConfig, model: ModelParameters, tracer: Tracer | None = None
) -> TransferOutcome:
    """Upload ``model`` to the configured peer and wait for the completion ack."""
    if not model.tensors:
        raise EmptyModel("refusing to send a model with no tensors")
    tracer = tracer if tracer is not None else Tracer()
    data = serialize_model(model)
    size = chunk_size_for(len(data), config.target_chunks) if config.target_chunks else config.chunk_size
    chunks = chunk_model(data, size)
    node, peer = config.node, config.peer
    me, them = str(node), str(peer)
    dest = (config.peer_host, config.peer_port)
    clock = _Clock()

    sock = _bind(config.bind_host, config.bind_port)
    session = sender.new_session(node, peer, config.sender_timeout, config.max_retries)
    deadline: int | None = None
    outcome: TransferOutcome | None = None

    def interpret(actions: list) -> None:
        nonlocal deadline, outcome
        for a in actions:
            now = clock()
            if isinstance(a, sender.Emit):
                tracer.frame(now, me, "tx", a.frame, peer=them)
                try:
                    sock.sendto(encode_frame(a.frame), dest)
                except ConnectionRefusedError:
                    pass  # ICMP unreachable from an earlier send; same as a lost datagram
            elif isinstance(a, sender.StartTimer):
                deadline = now + a.duration
            elif isinstance(a, sender.StopTimer):
                deadline = None
            elif isinstance(a, sender.Complete):
                tracer.event(now, me, "complete", peer=them)
                outcome = TransferOutcome(COMPLETED)
            elif isinstance(a, sender.Fail):
                outcome = TransferOutcome(FAILED, a.reason)

    try:
        tracer.event(clock(), me, "begin", np=chunks.np, addr=me, peer=them)
        session, actions = sender.begin_transfer(session, chunks, clock())
        interpret(actions)
        while outcome is None:
            remaining = deadline - clock()
            if remaining <= 0:
                tracer.event(clock(), me, "timeout" if session.retries_left else "fail", peer=them)
                session, actions = sender.on_timeout(session, clock())
                interpret(actions)
                continue
            sock.settimeout(remaining / 1e9)
            try:
                datagram, _ = sock.recvfrom(MAX_DATAGRAM)
            except (socket.timeout, ConnectionRefusedError):
                continue
            try:
                frame = decode_frame(datagram)
            except MalformedFrame:
                continue
            tracer.frame(clock(), me, "rx", frame, peer=them)
            session, actions = sender.on_frame(session, frame, clock())
            interpret(actions)
    except OSError as exc:
        log.error("transfer aborted: %s", exc)
        return TransferOutcome(FAILED, f"{IO_ERROR}: {exc}")
    finally:
        sock.close()
    return outcome
