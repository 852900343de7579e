"""Model parameter serialization, hex text encoding, and fixed-size chunking.

Serialized layout (``.fmp`` files use it verbatim)::

    u32 tensor_count
    repeated tensor_count times:
        u8  rank
        u32 dim[rank]
        f32 value[product(dims)]

All integers and floats are big-endian; floats are IEEE-754 binary32.
"""

from __future__ import annotations

import math
import re
import struct
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from flrudp.errors import EmptyModel, IncompleteChunkSet, InvalidHex, MalformedModel, RankTooLarge

_BE_F32 = np.dtype(">f4")
_HEX_RE = re.compile(r"[0-9a-f]*")


@dataclass(frozen=True, eq=False, init=False)
class Tensor:
    shape: tuple[int, ...]
    values: np.ndarray

    def __init__(self, shape: Sequence[int], values) -> None:
        shape = tuple(int(d) for d in shape)
        if any(d < 0 for d in shape):
            raise ValueError(f"negative dimension in shape {shape}")
        arr = np.array(values, dtype=np.float32).reshape(-1)
        if arr.size != math.prod(shape):
            raise ValueError(f"{arr.size} values do not fill shape {shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "values", arr)

    def __eq__(self, other: object) -> bool:
        # Bitwise: NaN payloads and signed zeros must survive the transport unchanged.
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )

    def __hash__(self) -> int:
        return hash((self.shape, self.values.tobytes()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, values={self.values.tolist()!r})"


@dataclass(frozen=True)
class ModelParameters:
    tensors: tuple[Tensor, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "tensors", tuple(self.tensors))

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [t.shape for t in self.tensors]

    def __len__(self) -> int:
        return len(self.tensors)


@dataclass(frozen=True)
class ChunkSet:
    chunks: tuple[bytes, ...]
    chunk_size: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "chunks", tuple(self.chunks))
        if not self.chunks:
            raise EmptyModel("a chunk set needs at least one chunk")
        for i, c in enumerate(self.chunks):
            last = i == len(self.chunks) - 1
            if not c or len(c) > self.chunk_size or (not last and len(c) != self.chunk_size):
                raise ValueError(f"chunk {i + 1} has invalid length {len(c)}")

    @property
    def np(self) -> int:
        return len(self.chunks)

    def chunk(self, x: int) -> bytes:
        """Chunk for 1-based sequence index ``x``."""
        return self.chunks[x - 1]


def serialize_model(model: ModelParameters) -> bytes:
    parts = [struct.pack("!I", len(model.tensors))]
    for t in model.tensors:
        rank = len(t.shape)
        if rank > 255:
            raise RankTooLarge(f"tensor rank {rank} exceeds 255")
        parts.append(struct.pack(f"!B{rank}I", rank, *t.shape))
        parts.append(t.values.astype(_BE_F32).tobytes())
    return b"".join(parts)


def deserialize_model(data: bytes) -> ModelParameters:
    view = memoryview(bytes(data))
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if n > len(view) - pos:
            raise MalformedModel(f"truncated at offset {pos}: need {n} bytes")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("!I", take(4))
    tensors = []
    for _ in range(count):
        (rank,) = struct.unpack("!B", take(1))
        shape = struct.unpack(f"!{rank}I", take(4 * rank))
        n = math.prod(shape)
        if n * 4 > len(view) - pos:
            raise MalformedModel(f"tensor of shape {shape} overruns the stream")
        values = np.frombuffer(take(4 * n), dtype=_BE_F32).astype(np.float32)
        tensors.append(Tensor(shape, values))
    if pos != len(view):
        raise MalformedModel(f"{len(view) - pos} trailing bytes after last tensor")
    return ModelParameters(tuple(tensors))


def to_hex(data: bytes) -> str:
    return bytes(data).hex()


def from_hex(text: str | bytes) -> bytes:
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("ascii")
        except UnicodeDecodeError:
            raise InvalidHex("non-ASCII hex text") from None
    if len(text) % 2 or _HEX_RE.fullmatch(text) is None:
        raise InvalidHex(f"invalid hex text of length {len(text)}")
    return bytes.fromhex(text)


def chunk_count(length: int, chunk_size: int) -> int:
    return -(-length // chunk_size)


def chunk_size_for(length: int, target_np: int) -> int:
    """Smallest chunk size that splits ``length`` bytes into at most ``target_np`` chunks.

    The result yields exactly ``target_np`` chunks whenever that is achievable
    with equal-sized leading chunks (e.g. 78 bytes into 4 chunks of 20).
    """
    if target_np < 1:
        raise ValueError("target chunk count must be positive")
    return max(1, chunk_count(length, target_np))


def chunk_model(data: bytes, chunk_size: int) -> ChunkSet:
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be positive, got {chunk_size}")
    if not data:
        raise EmptyModel("cannot chunk an empty byte stream")
    data = bytes(data)
    return ChunkSet(
        tuple(data[i:i + chunk_size] for i in range(0, len(data), chunk_size)), chunk_size
    )


def reassemble(chunks: ChunkSet | Mapping[int, bytes], np_total: int | None = None) -> bytes:
    """Concatenate chunks ``1..np`` in order.

    Accepts a :class:`ChunkSet` or a mapping of 1-based index to chunk bytes, in
    which case ``np_total`` must be given.
    """
    if isinstance(chunks, ChunkSet):
        return b"".join(chunks.chunks)
    if np_total is None or np_total < 1:
        raise IncompleteChunkSet("packet total unknown")
    missing = [x for x in range(1, np_total + 1) if x not in chunks]
    if missing:
        raise IncompleteChunkSet(f"missing chunks {missing}")
    return b"".join(chunks[x] for x in range(1, np_total + 1))


def save_model(path: str | Path, model: ModelParameters) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_model(path: str | Path) -> ModelParameters:
    return deserialize_model(Path(path).read_bytes())
