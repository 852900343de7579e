"""Deterministic discrete-event simulation of one FL round over a lossy star network.

Every client has its own full-duplex point-to-point link to the server. Each
direction of a link has one transmitter: a frame starts transmitting when the
previous frame on that direction has finished, and is delivered

    start + one_way_delay + encoded_bits / data_rate

later (integer nanoseconds, floor division). Simultaneous events are processed
in insertion order.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
import json
import math
import struct
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from ipaddress import IPv4Address

from flrudp import receiver, sender
from flrudp.aggregation import GlobalModelStore, apply_round, has_nonfinite, local_train, pseudo_train
from flrudp.errors import MalformedFrame, MalformedModel, ShapeMismatch, SimulationStall
from flrudp.model_codec import chunk_model, chunk_size_for, deserialize_model, serialize_model
from flrudp.trace import TraceRecord, Tracer, counters, render_human_log
from flrudp.wire_format import Frame, FrameKind, decode_frame, encode_frame

MS = 1_000_000
SECOND = 1_000_000_000

DEFAULT_ARCHITECTURE: tuple[tuple[int, ...], ...] = ((4, 3), (3,))
SERVER_ADDR = "10.1.2.5"
FIRST_CLIENT_ADDR = "10.1.2.4"

COMPLETED = "Completed"
FAILED = "Failed"


def client_address(index: int) -> str:
    """Client 0 is 10.1.2.4; further clients skip the server's 10.1.2.5."""
    if index == 0:
        return FIRST_CLIENT_ADDR
    return str(IPv4Address(SERVER_ADDR) + index)


@dataclass(frozen=True)
class SimConfig:
    data_rate: int = 5_000_000
    one_way_delay: int = 2000 * MS
    sender_timeout: int | None = None
    receiver_nack_timeout: int | None = None
    max_retries: int = 3
    chunk_size: int = 1024
    target_chunks: int | None = None
    client_count: int = 1
    architecture: tuple[tuple[int, ...], ...] = DEFAULT_ARCHITECTURE
    train_steps: int = 0

    def __post_init__(self) -> None:
        default_timeout = 2 * self.one_way_delay + 1000 * MS
        if self.sender_timeout is None:
            object.__setattr__(self, "sender_timeout", default_timeout)
        if self.receiver_nack_timeout is None:
            object.__setattr__(self, "receiver_nack_timeout", default_timeout)
        object.__setattr__(self, "architecture", tuple(tuple(s) for s in self.architecture))
        if self.data_rate <= 0 or self.one_way_delay <= 0:
            raise ValueError("data rate and delay must be positive")
        if self.sender_timeout <= 0 or self.receiver_nack_timeout <= 0:
            raise ValueError("timeouts must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be non-negative")
        if self.chunk_size < 1 or (self.target_chunks is not None and self.target_chunks < 1):
            raise ValueError("chunk size and chunk count must be positive")
        if self.client_count < 1:
            raise ValueError("need at least one client")

    @property
    def clients(self) -> list[str]:
        return [client_address(i) for i in range(self.client_count)]

    @property
    def linger(self) -> int:
        # Longest a sender can keep retransmitting after the server finished.
        return (self.max_retries + 1) * self.sender_timeout + 2 * self.one_way_delay

    def serialization_time(self, nbytes: int) -> int:
        return nbytes * 8 * SECOND // self.data_rate

    def latency(self, nbytes: int) -> int:
        return self.one_way_delay + self.serialization_time(nbytes)

    def chunk_size_for(self, nbytes: int) -> int:
        if self.target_chunks is not None:
            return chunk_size_for(nbytes, self.target_chunks)
        return self.chunk_size


class Direction(enum.Enum):
    C2S = "c2s"
    S2C = "s2c"


_KIND_ALIASES = {"DATA": FrameKind.DATA, "NACK": FrameKind.NACK,
                 "ACK": FrameKind.COMPLETE_ACK, "COMPLETE_ACK": FrameKind.COMPLETE_ACK}


@dataclass(frozen=True)
class DropRule:
    """Drop the ``k``-th transmission of frame ``(kind, x)`` in ``direction``.

    ``client`` is a 1-based client index; ``None`` applies the rule on every
    client's link independently.
    """

    direction: Direction
    kind: FrameKind
    x: int
    k: int = 1
    client: int | None = None

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError("occurrence ordinal must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "DropRule":
        """Parse ``direction:kind:x:k[@client]``, e.g. ``c2s:DATA:2:1``."""
        body, _, client = text.partition("@")
        try:
            direction, kind, x, k = body.split(":")
            return cls(
                Direction(direction.lower()),
                _KIND_ALIASES[kind.upper()],
                int(x),
                int(k),
                int(client) if client else None,
            )
        except (ValueError, KeyError) as exc:
            raise ValueError(f"bad drop rule {text!r}: expected direction:kind:x:k[@client]") from exc


@dataclass(frozen=True)
class DropPlan:
    rules: tuple[DropRule, ...] = ()
    loss_p: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        if self.loss_p is not None and not 0.0 <= self.loss_p <= 1.0:
            raise ValueError(f"loss probability {self.loss_p} outside [0, 1]")

    @classmethod
    def bernoulli(cls, p: float, seed: int) -> "DropPlan":
        return cls(loss_p=p, seed=seed)

    def drops(self, client: int, direction: Direction, frame: Frame, occurrence: int, ordinal: int) -> bool:
        """Decide the fate of one transmission.

        ``occurrence`` counts transmissions of this (kind, x) on this link so
        far, ``ordinal`` counts all transmissions on this link; both 1-based.
        """
        if self.loss_p is not None:
            return _uniform(self.seed, client, direction, ordinal) < self.loss_p
        for r in self.rules:
            if (r.direction is direction and r.kind is frame.kind and r.x == frame.header.x
                    and r.k == occurrence and (r.client is None or r.client == client + 1)):
                return True
        return False


def _uniform(seed: int, client: int, direction: Direction, ordinal: int) -> float:
    """Counter-based uniform draw in [0, 1) keyed by link identity and ordinal."""
    key = struct.pack("!QIcQ", seed & (2**64 - 1), client, direction.value[0].encode(), ordinal)
    (n,) = struct.unpack("!Q", hashlib.blake2b(key, digest_size=8).digest())
    return n / 2**64


@dataclass
class RoundTrace:
    records: list[TraceRecord]
    outcomes: dict[str, str]
    finish_times: dict[str, int]
    global_digest: str
    global_store: GlobalModelStore
    clients: list[str]
    server: str
    client_bytes: dict[str, bytes] = field(repr=False)
    delivered_bytes: dict[str, list[bytes]] = field(repr=False)
    failure_reasons: dict[str, str] = field(default_factory=dict)

    @property
    def counters(self) -> dict[str, int]:
        return counters(self.records)

    def client_counters(self, client: str) -> dict[str, int]:
        return counters(self.records, client)

    @property
    def all_completed(self) -> bool:
        return all(o == COMPLETED for o in self.outcomes.values())

    def summary(self) -> dict:
        return {
            "outcomes": self.outcomes,
            "failure_reasons": self.failure_reasons,
            "finish_times_ns": self.finish_times,
            "counters": self.counters,
            "global_digest": self.global_digest,
            "rounds_applied": self.global_store.rounds_applied,
        }

    def to_jsonl(self) -> str:
        lines = [r.to_json() for r in self.records]
        lines.append(json.dumps({"event": "summary", **self.summary()}, separators=(",", ":"), sort_keys=True))
        return "\n".join(lines) + "\n"

    def human_log(self) -> str:
        return render_human_log(self.records, self.clients, self.server)


class _Link:
    """One direction of one client's point-to-point link."""

    def __init__(self) -> None:
        self.free_at = 0
        self.ordinal = 0
        self.occurrences: dict[tuple[FrameKind, int], int] = {}


class _Round:
    def __init__(self, config: SimConfig, plan: DropPlan, seeds: Sequence[int],
                 store: GlobalModelStore) -> None:
        self.cfg = config
        self.plan = plan
        self.seeds = list(seeds)
        self.store = store
        self.server = SERVER_ADDR
        self.clients = config.clients
        self.now = 0
        self._queue: list = []
        self._seq = itertools.count()
        self.tracer = Tracer()
        self.router = receiver.SessionRouter(
            self.server, config.receiver_nack_timeout, config.max_retries, config.linger
        )
        self.sessions: list[sender.SenderSession] = []
        self.links = {(i, d): _Link() for i in range(config.client_count) for d in Direction}
        self.sender_gen = [0] * config.client_count
        self.nack_gen: dict[str, int] = {}
        self.outcomes: dict[str, str] = {}
        self.failure_reasons: dict[str, str] = {}
        self.finish_times: dict[str, int] = {}
        self.client_bytes: dict[str, bytes] = {}
        self.delivered: dict[str, list[bytes]] = {c: [] for c in self.clients}

    def schedule(self, at: int, fn: Callable, *args) -> None:
        heapq.heappush(self._queue, (at, next(self._seq), fn, args))

    # -- network ---------------------------------------------------------

    def transmit(self, client: int, direction: Direction, frame: Frame) -> None:
        link = self.links[(client, direction)]
        start = max(self.now, link.free_at)
        link.free_at = start + self.cfg.serialization_time(len(encode_frame(frame)))
        if start == self.now:
            self._start_tx(client, direction, frame)
        else:
            self.schedule(start, self._start_tx, client, direction, frame)

    def _start_tx(self, client: int, direction: Direction, frame: Frame) -> None:
        data = encode_frame(frame)
        src, dst = self._ends(client, direction)
        link = self.links[(client, direction)]
        link.ordinal += 1
        key = (frame.kind, frame.header.x)
        link.occurrences[key] = link.occurrences.get(key, 0) + 1
        self.tracer.frame(self.now, src, "tx", frame, peer=dst)
        if self.plan.drops(client, direction, frame, link.occurrences[key], link.ordinal):
            self.tracer.frame(self.now, src, "drop", frame, peer=dst)
            return
        self.schedule(self.now + self.cfg.latency(len(data)), self._deliver, client, direction, data)

    def _ends(self, client: int, direction: Direction) -> tuple[str, str]:
        c = self.clients[client]
        return (c, self.server) if direction is Direction.C2S else (self.server, c)

    def _deliver(self, client: int, direction: Direction, data: bytes) -> None:
        src, dst = self._ends(client, direction)
        try:
            frame = decode_frame(data)
        except MalformedFrame:
            self.tracer.event(self.now, dst, "malformed", peer=src)
            return
        self.tracer.frame(self.now, dst, "rx", frame, peer=src)
        if direction is Direction.C2S:
            self._server_actions(client, self.router.handle_frame(frame, self.now))
        else:
            session, actions = sender.on_frame(self.sessions[client], frame, self.now)
            self.sessions[client] = session
            self._client_actions(client, actions)

    # -- client side -----------------------------------------------------

    def _client_actions(self, client: int, actions: list) -> None:
        addr = self.clients[client]
        for a in actions:
            if isinstance(a, sender.Emit):
                self.transmit(client, Direction.C2S, a.frame)
            elif isinstance(a, sender.StartTimer):
                self.sender_gen[client] += 1
                self.schedule(self.now + a.duration, self._sender_timer, client, self.sender_gen[client])
            elif isinstance(a, sender.StopTimer):
                self.sender_gen[client] += 1
            elif isinstance(a, sender.Complete):
                self.tracer.event(self.now, addr, "complete", peer=self.server)
                self._finish(addr, COMPLETED)
            elif isinstance(a, sender.Fail):
                self.failure_reasons[addr] = a.reason
                self._finish(addr, FAILED)

    def _sender_timer(self, client: int, gen: int) -> None:
        session = self.sessions[client]
        if gen != self.sender_gen[client] or session.state is not sender.SenderState.AWAITING_ACK:
            return
        addr = self.clients[client]
        self.tracer.event(self.now, addr, "timeout" if session.retries_left else "fail", peer=self.server)
        session, actions = sender.on_timeout(session, self.now)
        self.sessions[client] = session
        self._client_actions(client, actions)

    def _finish(self, addr: str, outcome: str) -> None:
        self.outcomes[addr] = outcome
        self.finish_times[addr] = self.now

    # -- server side -----------------------------------------------------

    def _server_actions(self, client: int, actions: list) -> None:
        addr = self.clients[client]
        for a in actions:
            if isinstance(a, sender.Emit):
                self.transmit(client, Direction.S2C, a.frame)
            elif isinstance(a, receiver.StartNackTimer):
                self.nack_gen[addr] = self.nack_gen.get(addr, 0) + 1
                self.schedule(self.now + a.duration, self._nack_timer, client, self.nack_gen[addr])
            elif isinstance(a, receiver.StopNackTimer):
                self.nack_gen[addr] = self.nack_gen.get(addr, 0) + 1
            elif isinstance(a, receiver.DeliverModel):
                self._aggregate(addr, a.data)
            elif isinstance(a, receiver.Evict):
                self.nack_gen[addr] = self.nack_gen.get(addr, 0) + 1
                self.tracer.event(self.now, self.server, "evict", addr=addr)

    def _nack_timer(self, client: int, gen: int) -> None:
        addr = self.clients[client]
        if gen != self.nack_gen.get(addr):
            return
        ipaddr = IPv4Address(addr)
        buf = self.router.buffers.get(ipaddr)
        if buf is None or buf.state is not receiver.ReceiverState.RECOVERING:
            return
        self.tracer.event(self.now, self.server, "nack_timeout", addr=addr)
        self._server_actions(client, self.router.handle_nack_timeout(ipaddr, self.now))

    def _aggregate(self, addr: str, data: bytes) -> None:
        self.delivered[addr].append(data)
        self.tracer.event(self.now, self.server, "deliver", addr=addr)
        try:
            params = deserialize_model(data)
            if has_nonfinite(params):
                self.tracer.event(self.now, self.server, "nonfinite_warning", addr=addr)
            self.store = apply_round(self.store, params, self.now, addr)
        except (MalformedModel, ShapeMismatch):
            self.tracer.event(self.now, self.server, "aggregate_rejected", addr=addr)
            return
        self.tracer.event(self.now, self.server, "aggregate", addr=addr)

    # -- driver ----------------------------------------------------------

    def run(self) -> RoundTrace:
        for i, addr in enumerate(self.clients):
            model = pseudo_train(self.seeds[i], self.cfg.architecture)
            if self.cfg.train_steps:
                model = local_train(model, self.seeds[i], steps=self.cfg.train_steps)
            data = serialize_model(model)
            self.client_bytes[addr] = data
            chunks = chunk_model(data, self.cfg.chunk_size_for(len(data)))
            session = sender.new_session(addr, self.server, self.cfg.sender_timeout, self.cfg.max_retries)
            self.tracer.event(self.now, addr, "begin", np=chunks.np, addr=addr, peer=self.server)
            session, actions = sender.begin_transfer(session, chunks, self.now)
            self.sessions.append(session)
            self._client_actions(i, actions)

        while self._queue:
            self.now, _, fn, args = heapq.heappop(self._queue)
            fn(*args)

        stuck = [c for c in self.clients if c not in self.outcomes]
        if stuck:
            raise SimulationStall(f"event queue empty but clients {stuck} never finished")
        return RoundTrace(
            records=self.tracer.records,
            outcomes={c: self.outcomes[c] for c in self.clients},
            finish_times={c: self.finish_times[c] for c in self.clients},
            global_digest=hashlib.sha256(serialize_model(self.store.current)).hexdigest(),
            global_store=self.store,
            clients=self.clients,
            server=self.server,
            client_bytes=self.client_bytes,
            delivered_bytes=self.delivered,
            failure_reasons=dict(sorted(self.failure_reasons.items())),
        )


def default_seeds(client_count: int) -> list[int]:
    return list(range(1, client_count + 1))


def run_round(
    config: SimConfig,
    plan: DropPlan | None = None,
    seeds: Sequence[int] | None = None,
    store: GlobalModelStore | None = None,
) -> RoundTrace:
    """Simulate one FL round: every client uploads its model once."""
    seeds = default_seeds(config.client_count) if seeds is None else list(seeds)
    if len(seeds) != config.client_count:
        raise ValueError(f"{len(seeds)} seeds for {config.client_count} clients")
    store = GlobalModelStore.initial(config.architecture) if store is None else store
    return _Round(config, plan or DropPlan(), seeds, store).run()


def _trial_seed(base_seed: int, p_index: int, trial: int) -> int:
    key = struct.pack("!QII", base_seed & (2**64 - 1), p_index, trial)
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "big")


def run_campaign(
    config: SimConfig,
    p_values: Sequence[float],
    trials: int,
    base_seed: int = 0,
) -> list[dict]:
    """Run ``trials`` independent Bernoulli-loss rounds per loss probability.

    Returns one summary per probability: the fraction of rounds in which every
    client completed, mean DATA retransmissions per round, and mean completion
    time of fully completed rounds (``None`` when none completed).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = []
    for pi, p in enumerate(p_values):
        completed, retrans, times = 0, 0, []
        for t in range(trials):
            seed = _trial_seed(base_seed, pi, t)
            seeds = [(seed + i + 1) % 2**63 for i in range(config.client_count)]
            trace = run_round(config, DropPlan.bernoulli(p, seed), seeds)
            retrans += trace.counters["retransmissions"]
            if trace.all_completed:
                completed += 1
                times.append(max(trace.finish_times.values()))
        out.append({
            "p": p,
            "trials": trials,
            "completion_rate": completed / trials,
            "mean_retransmissions": retrans / trials,
            "mean_completion_time_ns": math.fsum(times) / len(times) if times else None,
        })
    return out
