"""NACK-based reliable UDP transport for federated-learning parameter exchange."""

from flrudp.aggregation import GlobalModelStore, apply_round, federated_average, pseudo_train
from flrudp.errors import FlrudpError
from flrudp.model_codec import ModelParameters, Tensor, deserialize_model, serialize_model
from flrudp.netsim import DropPlan, DropRule, RoundTrace, SimConfig, run_campaign, run_round
from flrudp.udp_transport import EndpointConfig, TransferOutcome, send_model, serve
from flrudp.wire_format import Frame, FrameKind, SequenceHeader, decode_frame, encode_frame

__version__ = "0.1.0"

__all__ = [
    "DropPlan",
    "DropRule",
    "EndpointConfig",
    "Frame",
    "FrameKind",
    "FlrudpError",
    "GlobalModelStore",
    "ModelParameters",
    "SequenceHeader",
    "Tensor",
    "apply_round",
    "decode_frame",
    "deserialize_model",
    "encode_frame",
    "federated_average",
    "pseudo_train",
    "RoundTrace",
    "run_campaign",
    "run_round",
    "send_model",
    "serialize_model",
    "serve",
    "SimConfig",
    "TransferOutcome",
]
