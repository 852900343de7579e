"""Event records shared by the simulator and the socket transport."""

from __future__ import annotations

import json
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass

from flrudp.wire_format import Frame

_EVENT_COUNTERS = {
    "drop": "drops",
    "timeout": "timeouts",
    "nack_timeout": "nack_timeouts",
    "fail": "failures",
    "deliver": "deliveries",
    "complete": "completions",
}
COUNTER_KEYS = ("data_sent", "retransmissions", "nacks", "acks", *_EVENT_COUNTERS.values())


@dataclass(frozen=True)
class TraceRecord:
    time_ns: int
    node: str
    event: str
    kind: str | None = None
    x: int | None = None
    np: int | None = None
    addr: str | None = None
    peer: str | None = None

    @classmethod
    def for_frame(
        cls, time_ns: int, node: str, event: str, frame: Frame, peer: str | None = None
    ) -> "TraceRecord":
        h = frame.header
        return cls(time_ns, node, event, frame.kind.name, h.x, h.np, str(h.addr), peer)

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    def key(self) -> tuple:
        """Everything except the timestamp."""
        return (self.node, self.event, self.kind, self.x, self.np, self.addr, self.peer)


class Tracer:
    def __init__(self) -> None:
        self.records: list[TraceRecord] = []

    def frame(self, time_ns: int, node: str, event: str, frame: Frame, peer: str | None = None) -> None:
        self.records.append(TraceRecord.for_frame(time_ns, node, event, frame, peer))

    def event(self, time_ns: int, node: str, event: str, **fields) -> None:
        self.records.append(TraceRecord(time_ns, node, event, **fields))


def counters(records: Iterable[TraceRecord], client: str | None = None) -> dict[str, int]:
    """Tally protocol events, optionally restricted to those involving ``client``."""
    c: Counter[str] = Counter()
    first_sent: set[tuple[str, int | None]] = set()
    for r in records:
        if client is not None and client not in (r.node, r.addr, r.peer):
            continue
        if r.event == "tx":
            if r.kind == "DATA":
                c["data_sent"] += 1
                if (r.node, r.x) in first_sent:
                    c["retransmissions"] += 1
                first_sent.add((r.node, r.x))
            elif r.kind == "NACK":
                c["nacks"] += 1
            elif r.kind == "COMPLETE_ACK":
                c["acks"] += 1
        elif r.event in _EVENT_COUNTERS:
            c[_EVENT_COUNTERS[r.event]] += 1
    return {k: c[k] for k in COUNTER_KEYS}


def render_human_log(records: Sequence[TraceRecord], clients: Sequence[str], server: str) -> str:
    """Terminal-style transcript of a round, phrased like a classic FL demo log."""
    label = {addr: i + 1 for i, addr in enumerate(clients)}
    lines: list[str] = []
    for r in records:
        if r.event == "begin":
            lines += [f"Agent {label[r.node]} preparing to send", "Timer Started"]
        elif r.event == "tx" and r.kind == "DATA":
            lines.append(f"Now at Packet {r.x} of {r.np}")
        elif r.event == "rx" and r.kind == "DATA" and r.node == server:
            lines.append(str(r.x))
        elif r.event == "tx" and r.kind == "NACK":
            lines.append(f"Server attempting to retrieve lost packet : {r.x}")
        elif r.event == "rx" and r.kind == "NACK":
            lines += [f"Packet: {r.x} is missing!", f"Agent preparing to send missing packet: {r.x}"]
        elif r.event == "timeout":
            lines.append("Timer has ended without a response, re-sending last packet")
        elif r.event == "nack_timeout":
            lines.append(f"Server NACK timer expired for Agent {label.get(r.addr, r.addr)}")
        elif r.event == "aggregate":
            lines.append(f"Transaction Complete Global Model aggregated +{r.time_ns}.0ns")
        elif r.event == "aggregate_rejected":
            lines.append(f"Aggregation rejected for Agent {label.get(r.addr, r.addr)}")
        elif r.event == "tx" and r.kind == "COMPLETE_ACK":
            lines.append("Server Replying")
        elif r.event == "complete":
            lines += [f"All packets Received on the Server for Agent {label[r.node]}", "Timer Stopped"]
        elif r.event == "fail":
            lines.append(f"Agent {label[r.node]} retries exhausted, transfer failed")
        elif r.event == "drop":
            lines.append(f"[network] dropped {r.kind} ({r.x}, {r.np}, {r.addr})")
    return "\n".join(lines) + "\n"
