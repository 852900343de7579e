"""Pairwise federated averaging of the global model with one client's parameters."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from flrudp.errors import ShapeMismatch
from flrudp.model_codec import ModelParameters, Tensor

log = logging.getLogger(__name__)

GLOBAL_INIT_SEED = 0
def federated_average(server: ModelParameters, client: ModelParameters) -> ModelParameters:
    """Elementwise ``(server + client) / 2`` rounded once to binary32, shapes preserved.

    The sum and halving run in binary64, which carries enough extra precision
    that rounding there and then to binary32 still yields the correctly
    rounded mean. Plain binary32 arithmetic gives the same bits except where
    its sum would overflow, so ``federated_average(w, w) == w`` holds for
    every finite ``w``.
    """
    if len(server.tensors) != len(client.tensors):
        raise ShapeMismatch(
            f"server has {len(server.tensors)} tensors, client has {len(client.tensors)}"
        )
    out = []
    for i, (s, c) in enumerate(zip(server.tensors, client.tensors)):
        if s.shape != c.shape:
            raise ShapeMismatch(f"tensor {i}: server shape {s.shape} != client shape {c.shape}")
        with np.errstate(invalid="ignore"):
            mean = (s.values.astype(np.float64) + c.values) / 2.0
        out.append(Tensor(s.shape, mean.astype(np.float32)))
    return ModelParameters(tuple(out))


def has_nonfinite(model: ModelParameters) -> bool:
    return any(not np.isfinite(t.values).all() for t in model.tensors)


def pseudo_train(seed: int, architecture: Sequence[Sequence[int]]) -> ModelParameters:
    """Deterministic stand-in for local training.

    Values are uniform in [-0.5, 0.5), drawn from numpy's PCG64 generator seeded
    with ``seed`` and consumed tensor by tensor in architecture order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = []
    for shape in architecture:
        n = math.prod(shape)
        tensors.append(Tensor(shape, rng.random(n, dtype=np.float32) - np.float32(0.5)))
    return ModelParameters(tuple(tensors))


def local_train(
    model: ModelParameters,
    seed: int,
    steps: int = 20,
    lr: float = 0.05,
    samples: int = 64,
) -> ModelParameters:
    """A few steps of gradient descent on a synthetic linear-regression task.

    Expects ``model`` to be a single dense layer: a weight matrix of shape
    ``(inputs, outputs)`` followed by a bias vector of shape ``(outputs,)``.
    Targets come from a random teacher layer, so the loss genuinely decreases.
    """
    if len(model.tensors) != 2 or len(model.tensors[0].shape) != 2:
        raise ValueError("local_train expects [weights (in, out), bias (out,)]")
    w_t, b_t = model.tensors
    n_in, n_out = w_t.shape
    if b_t.shape != (n_out,):
        raise ValueError(f"bias shape {b_t.shape} does not match {n_out} outputs")
    rng = np.random.Generator(np.random.PCG64(seed))
    x = rng.standard_normal((samples, n_in)).astype(np.float32)
    teacher_w = rng.standard_normal((n_in, n_out)).astype(np.float32)
    teacher_b = rng.standard_normal(n_out).astype(np.float32)
    y = x @ teacher_w + teacher_b
    w = w_t.values.reshape(n_in, n_out).copy()
    b = b_t.values.copy()
    lr32 = np.float32(lr)
    for _ in range(steps):
        err = x @ w + b - y
        w -= lr32 * (x.T @ err) * np.float32(2.0 / samples)
        b -= lr32 * err.sum(axis=0) * np.float32(2.0 / samples)
    return ModelParameters((Tensor(w_t.shape, w), Tensor(b_t.shape, b)))


@dataclass(frozen=True)
class GlobalModelStore:
    current: ModelParameters
    rounds_applied: int = 0
    last_update_time: int = 0
    arrival_order: tuple[str, ...] = ()

    @classmethod
    def initial(cls, architecture: Sequence[Sequence[int]]) -> "GlobalModelStore":
        return cls(pseudo_train(GLOBAL_INIT_SEED, architecture))


def apply_round(
    store: GlobalModelStore,
    client_params: ModelParameters,
    now: int = 0,
    client: str = "",
) -> GlobalModelStore:
    """Fold one client's delivered parameters into the global model.

    Raises :class:`ShapeMismatch` and leaves ``store`` untouched if the client
    model does not match the global architecture.
    """
    merged = federated_average(store.current, client_params)
    if has_nonfinite(client_params):
        log.warning("client %s delivered non-finite parameters; averaging as-is", client)
    return replace(
        store,
        current=merged,
        rounds_applied=store.rounds_applied + 1,
        last_update_time=now,
        arrival_order=store.arrival_order + (client,),
    )
