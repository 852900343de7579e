"""Command-line entry point.

Settings resolve in order: built-in defaults, then the flat ``key = value``
file named by ``$FLRUDP_CONFIG``, then command-line flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys
from pathlib import Path

from flrudp import netsim
from flrudp.aggregation import GlobalModelStore, federated_average, pseudo_train
from flrudp.errors import FlrudpError
from flrudp.model_codec import load_model, save_model, serialize_model
from flrudp.udp_transport import DEFAULT_PORT, EndpointConfig, send_model, serve

CONFIG_ENV = "FLRUDP_CONFIG"

SCENARIOS: dict[str, tuple[str, ...]] = {
    "test1": ("c2s:DATA:2:1",),
    "test2": ("c2s:DATA:2:1", "c2s:DATA:3:1", "c2s:DATA:4:1"),
    "test3": (),
}
SCENARIO_CHUNKS = 4


def parse_arch(text: str) -> tuple[tuple[int, ...], ...]:
    """``"4x3,3"`` -> ``((4, 3), (3,))``; an empty item is a scalar."""
    return tuple(tuple(int(d) for d in item.split("x") if d) for item in text.split(","))


def parse_p_values(text: str) -> list[float]:
    return [float(p) for p in str(text).split(",") if p.strip()]


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1"), int(port)


# key -> (type, default)
SETTINGS: dict[str, tuple] = {
    "scenario": (str, "test3"),
    "clients": (int, 1),
    "drop": (str, None),
    "loss_p": (str, None),
    "seed": (int, None),
    "data_rate": (int, 5_000_000),
    "delay_ms": (float, 2000.0),
    "timeout_ms": (float, None),
    "nack_timeout_ms": (float, None),
    "max_retries": (int, 3),
    "chunk_size": (int, None),
    "chunks": (int, None),
    "arch": (parse_arch, netsim.DEFAULT_ARCHITECTURE),
    "train_steps": (int, 0),
    "trials": (int, 100),
    "trace_out": (str, None),
    "log_out": (str, None),
    "model_in": (str, None),
    "model_out": (str, None),
    "port": (int, DEFAULT_PORT),
    "bind": (str, "0.0.0.0"),
    "peer": (str, f"127.0.0.1:{DEFAULT_PORT}"),
    "node_addr": (str, None),
    "peer_node": (str, None),
}


def read_config_file(path: str | Path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or key not in SETTINGS:
            raise ValueError(f"{path}:{lineno}: unrecognised line {raw!r}")
        conv = SETTINGS[key][0]
        value = value.strip()
        if key == "drop":
            out.setdefault("drop", []).append(value)
        else:
            out[key] = conv(value)
    return out


def resolve(args: argparse.Namespace) -> dict:
    settings = {k: default for k, (_, default) in SETTINGS.items()}
    if os.environ.get(CONFIG_ENV):
        settings.update(read_config_file(os.environ[CONFIG_ENV]))
    settings.update({k: v for k, v in vars(args).items() if v is not None})
    return settings


def _ms(value: float | None) -> int | None:
    return None if value is None else round(value * netsim.MS)


def sim_config(s: dict, scenario: str | None = None) -> netsim.SimConfig:
    chunks = s["chunks"]
    if chunks is None and s["chunk_size"] is None and scenario in SCENARIOS:
        chunks = SCENARIO_CHUNKS
    return netsim.SimConfig(
        data_rate=s["data_rate"],
        one_way_delay=_ms(s["delay_ms"]),
        sender_timeout=_ms(s["timeout_ms"]),
        receiver_nack_timeout=_ms(s["nack_timeout_ms"] if s["nack_timeout_ms"] is not None else s["timeout_ms"]),
        max_retries=s["max_retries"],
        chunk_size=s["chunk_size"] or 1024,
        target_chunks=chunks,
        client_count=s["clients"],
        architecture=s["arch"],
        train_steps=s["train_steps"],
    )


def drop_plan(s: dict, scenario: str) -> netsim.DropPlan:
    if scenario in SCENARIOS:
        return netsim.DropPlan(tuple(netsim.DropRule.parse(r) for r in SCENARIOS[scenario]))
    seed = s["seed"] if s["seed"] is not None else 0
    if s["loss_p"] is not None:
        ps = parse_p_values(s["loss_p"])
        if len(ps) != 1:
            raise ValueError("simulate takes a single --loss-p value")
        return netsim.DropPlan.bernoulli(ps[0], seed)
    return netsim.DropPlan(tuple(netsim.DropRule.parse(r) for r in s["drop"] or ()))


def _write(path: str | None, text: str) -> None:
    if path:
        Path(path).write_text(text)


def cmd_simulate(args: argparse.Namespace) -> int:
    s = resolve(args)
    scenario = s["scenario"]
    if scenario not in (*SCENARIOS, "custom"):
        raise ValueError(f"unknown scenario {scenario!r}")
    if scenario in SCENARIOS and (s["drop"] or s["loss_p"]):
        raise ValueError("--drop/--loss-p only apply to --scenario custom")
    config = sim_config(s, scenario)
    base = s["seed"] if s["seed"] is not None else 1
    seeds = [base + i for i in range(config.client_count)]
    store = GlobalModelStore(load_model(s["model_in"])) if s["model_in"] else None
    trace = netsim.run_round(config, drop_plan(s, scenario), seeds, store)

    _write(s["trace_out"], trace.to_jsonl())
    if s["log_out"]:
        _write(s["log_out"], trace.human_log())
    else:
        sys.stdout.write(trace.human_log())
    if s["model_out"]:
        save_model(s["model_out"], trace.global_store.current)
    print(json.dumps(trace.summary(), sort_keys=True))
    return 0 if trace.all_completed else 1


def cmd_campaign(args: argparse.Namespace) -> int:
    s = resolve(args)
    config = sim_config(s)
    p_values = parse_p_values(s["loss_p"] or "0.05,0.1,0.2,0.3")
    seed = s["seed"] if s["seed"] is not None else 0
    summary = netsim.run_campaign(config, p_values, s["trials"], seed)
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in summary)
    _write(s["trace_out"], text)
    sys.stdout.write(text)
    return 0


def _endpoint(s: dict, **kw) -> EndpointConfig:
    return EndpointConfig(
        node_addr=s["node_addr"],
        peer_node=s["peer_node"],
        sender_timeout=_ms(s["timeout_ms"]) or 5000 * netsim.MS,
        nack_timeout=_ms(s["nack_timeout_ms"] or s["timeout_ms"]) or 5000 * netsim.MS,
        max_retries=s["max_retries"],
        chunk_size=s["chunk_size"] or 1024,
        target_chunks=s["chunks"],
        **kw,
    )


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_serve(args: argparse.Namespace) -> int:
    s = resolve(args)
    if s["model_in"]:
        store = GlobalModelStore(load_model(s["model_in"]))
    else:
        store = GlobalModelStore.initial(s["arch"])
    config = _endpoint(s, bind_host=s["bind"], bind_port=s["port"])
    signal.signal(signal.SIGTERM, _interrupt)
    logging.getLogger(__name__).info("serving on %s:%d", s["bind"], s["port"])
    store = serve(config, store, model_out=s["model_out"])
    print(json.dumps({"rounds_applied": store.rounds_applied, "arrival_order": list(store.arrival_order)}))
    return 0


def cmd_send(args: argparse.Namespace) -> int:
    s = resolve(args)
    if s["model_in"]:
        model = load_model(s["model_in"])
    else:
        model = pseudo_train(s["seed"] if s["seed"] is not None else 1, s["arch"])
    host, port = parse_endpoint(s["peer"])
    config = _endpoint(s, bind_host=s["bind"], bind_port=0, peer_host=host, peer_port=port)
    outcome = send_model(config, model)
    print(json.dumps({"status": outcome.status, "reason": outcome.reason}))
    return 0 if outcome.completed else 1


def cmd_aggregate_file(args: argparse.Namespace) -> int:
    merged = federated_average(load_model(args.server), load_model(args.client))
    if args.model_out:
        save_model(args.model_out, merged)
    print(hashlib.sha256(serialize_model(merged)).hexdigest())
    return 0


def cmd_pseudo_train(args: argparse.Namespace) -> int:
    s = resolve(args)
    save_model(args.output, pseudo_train(s["seed"] if s["seed"] is not None else 1, s["arch"]))
    return 0


def _sim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clients", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-rate", type=int, help="bits per second")
    p.add_argument("--delay-ms", type=float, help="one-way propagation delay")
    p.add_argument("--timeout-ms", type=float)
    p.add_argument("--nack-timeout-ms", type=float)
    p.add_argument("--max-retries", type=int)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--chunks", type=int, help="target packet count per model")
    p.add_argument("--arch", type=parse_arch, help='tensor shapes, e.g. "4x3,3"')
    p.add_argument("--train-steps", type=int)
    p.add_argument("--trace-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flrudp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one FL round")
    p.add_argument("--scenario", choices=[*SCENARIOS, "custom"])
    p.add_argument("--drop", action="append", help="direction:kind:x:k[@client], repeatable")
    p.add_argument("--loss-p")
    p.add_argument("--log-out")
    p.add_argument("--model-in")
    p.add_argument("--model-out")
    _sim_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("campaign", help="seeded Bernoulli-loss campaign")
    p.add_argument("--loss-p", help="comma-separated loss probabilities")
    p.add_argument("--trials", type=int)
    _sim_flags(p)
    p.set_defaults(func=cmd_campaign)

    for name, func, help_ in (("serve", cmd_serve, "run a UDP aggregation server"),
                              ("send", cmd_send, "upload one model over UDP")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--port", type=int)
        p.add_argument("--bind")
        p.add_argument("--peer", help="host:port of the server")
        p.add_argument("--node-addr", help="IPv4 written into frame headers")
        p.add_argument("--peer-node")
        p.add_argument("--model-in")
        p.add_argument("--model-out")
        p.add_argument("--seed", type=int)
        p.add_argument("--arch", type=parse_arch)
        p.add_argument("--timeout-ms", type=float)
        p.add_argument("--nack-timeout-ms", type=float)
        p.add_argument("--max-retries", type=int)
        p.add_argument("--chunk-size", type=int)
        p.add_argument("--chunks", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("aggregate-file", help="average two .fmp model files")
    p.add_argument("server")
    p.add_argument("client")
    p.add_argument("--model-out")
    p.set_defaults(func=cmd_aggregate_file)

    p = sub.add_parser("pseudo-train", help="write a seeded model to an .fmp file")
    p.add_argument("output")
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", type=parse_arch)
    p.set_defaults(func=cmd_pseudo_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = args.func
    ns = argparse.Namespace(**{k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")})
    try:
        return func(ns)
    except (FlrudpError, ValueError, OSError) as exc:
        print(f"flrudp: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
