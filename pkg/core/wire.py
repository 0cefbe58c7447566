"""Byte-exact frame codec for round messages.

Layout (all integers little-endian)::

    frame   = u32 payload_length | u8 tag | payload
    payload = u32 round | u32 party_id | array | array
    array   = u32 rows | u32 cols | rows*cols f64 LE, row-major

Tags: 1 = ProtoDown (party_id always 0), 2 = ReprUp.  Prior vectors travel
as 1 x Z arrays.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Union

import numpy as np

from core.errors import DegenerateInputError, FramingError, ProtocolError

TAG_PROTO_DOWN = 1
TAG_REPR_UP = 2

_FRAME_HEADER = struct.Struct("<IB")
_PAYLOAD_HEADER = struct.Struct("<II")
_ARRAY_HEADER = struct.Struct("<II")
_U32_MAX = 0xFFFFFFFF
_F64 = np.dtype("<f8")

FRAME_HEADER_SIZE = _FRAME_HEADER.size      # 5
PAYLOAD_HEADER_SIZE = _PAYLOAD_HEADER.size  # 8
ARRAY_HEADER_SIZE = _ARRAY_HEADER.size      # 8


@dataclass(frozen=True, eq=False)
class ProtoDown:
    round: int
    prototypes: np.ndarray      # (Z, d)
    global_prior: np.ndarray    # (Z,)

    variant = "ProtoDown"


@dataclass(frozen=True, eq=False)
class ReprUp:
    round: int
    party_id: int
    aligned_reps: np.ndarray    # (N_a, d)
    local_prior: np.ndarray     # (Z,)

    variant = "ReprUp"


RoundMessage = Union[ProtoDown, ReprUp]


def same_message(a: RoundMessage, b: RoundMessage) -> bool:
    """Field-wise equality with bitwise array comparison."""
    return type(a) is type(b) and encode_message(a) == encode_message(b)


# ---------------------------------------------------------------------------
# Sizes
# ---------------------------------------------------------------------------

def _array_size(rows: int, cols: int) -> int:
    return ARRAY_HEADER_SIZE + 8 * rows * cols


def proto_down_size(num_classes: int, dim: int) -> int:
    return FRAME_HEADER_SIZE + PAYLOAD_HEADER_SIZE + _array_size(num_classes, dim) + _array_size(1, num_classes)


def repr_up_size(num_aligned: int, dim: int, num_classes: int) -> int:
    return FRAME_HEADER_SIZE + PAYLOAD_HEADER_SIZE + _array_size(num_aligned, dim) + _array_size(1, num_classes)


def round_bytes(num_parties: int, num_aligned: int, dim: int, num_classes: int) -> int:
    """Bytes one protocol round moves: a ProtoDown and a ReprUp per party."""
    return num_parties * (proto_down_size(num_classes, dim) + repr_up_size(num_aligned, dim, num_classes))


def frame_size(msg: RoundMessage) -> int:
    if isinstance(msg, ProtoDown):
        z, d = np.shape(msg.prototypes)
        return proto_down_size(z, d)
    n, d = np.shape(msg.aligned_reps) if np.ndim(msg.aligned_reps) == 2 else (0, 0)
    return repr_up_size(n, d, int(np.size(msg.local_prior)))


# ---------------------------------------------------------------------------
# Encode
# ---------------------------------------------------------------------------

def _u32(value: int, name: str) -> int:
    if not 0 <= int(value) <= _U32_MAX:
        raise FramingError(f"{name}={value} does not fit in u32")
    return int(value)


def _encode_array(values: np.ndarray, name: str, as_row: bool = False) -> bytes:
    arr = np.asarray(values, dtype=np.float64)
    if as_row:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise FramingError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateInputError(f"{name} contains non-finite values")
    rows, cols = _u32(arr.shape[0], f"{name}.rows"), _u32(arr.shape[1], f"{name}.cols")
    return _ARRAY_HEADER.pack(rows, cols) + np.ascontiguousarray(arr, dtype=_F64).tobytes()


def encode_message(msg: RoundMessage) -> bytes:
    if isinstance(msg, ProtoDown):
        tag = TAG_PROTO_DOWN
        payload = _PAYLOAD_HEADER.pack(_u32(msg.round, "round"), 0)
        payload += _encode_array(msg.prototypes, "prototypes")
        payload += _encode_array(msg.global_prior, "global_prior", as_row=True)
    elif isinstance(msg, ReprUp):
        tag = TAG_REPR_UP
        payload = _PAYLOAD_HEADER.pack(_u32(msg.round, "round"), _u32(msg.party_id, "party_id"))
        payload += _encode_array(msg.aligned_reps, "aligned_reps")
        payload += _encode_array(msg.local_prior, "local_prior", as_row=True)
    else:
        raise ProtocolError(f"cannot encode {type(msg).__name__}")
    return _FRAME_HEADER.pack(_u32(len(payload), "payload_length"), tag) + payload


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

def _decode_array(payload: memoryview, offset: int, name: str) -> tuple[np.ndarray, int]:
    if len(payload) - offset < ARRAY_HEADER_SIZE:
        raise FramingError(f"truncated {name} header")
    rows, cols = _ARRAY_HEADER.unpack_from(payload, offset)
    offset += ARRAY_HEADER_SIZE
    nbytes = 8 * rows * cols
    if len(payload) - offset < nbytes:
        raise FramingError(f"{name} declares {rows}x{cols} but payload is short")
    arr = np.frombuffer(payload, dtype=_F64, count=rows * cols, offset=offset).astype(np.float64)
    return arr.reshape(rows, cols), offset + nbytes


def peek_frame_length(data: bytes) -> int:
    """Total frame length (header included) from the first 5 bytes."""
    if len(data) < FRAME_HEADER_SIZE:
        raise FramingError("frame header truncated")
    length, _ = _FRAME_HEADER.unpack_from(data, 0)
    return FRAME_HEADER_SIZE + length


def decode_message(data: bytes) -> tuple[RoundMessage, bytes]:
    """Decode one frame from the front of ``data``; returns (message, remainder)."""
    if len(data) < FRAME_HEADER_SIZE:
        raise FramingError(f"need {FRAME_HEADER_SIZE} header bytes, got {len(data)}")
    length, tag = _FRAME_HEADER.unpack_from(data, 0)
    end = FRAME_HEADER_SIZE + length
    if len(data) < end:
        raise FramingError(f"frame declares {length} payload bytes, only {len(data) - FRAME_HEADER_SIZE} present")
    if tag not in (TAG_PROTO_DOWN, TAG_REPR_UP):
        raise ProtocolError(f"unknown message tag {tag}")
    payload = memoryview(bytes(data[FRAME_HEADER_SIZE:end]))
    if len(payload) < PAYLOAD_HEADER_SIZE:
        raise FramingError("payload header truncated")
    round_, party_id = _PAYLOAD_HEADER.unpack_from(payload, 0)
    first, offset = _decode_array(payload, PAYLOAD_HEADER_SIZE, "matrix")
    vector, offset = _decode_array(payload, offset, "prior")
    if offset != len(payload):
        raise FramingError(f"payload has {len(payload) - offset} bytes past its arrays")
    if vector.shape[0] != 1:
        raise ProtocolError(f"prior must be a 1-row array, got {vector.shape}")
    prior = vector.reshape(-1)

    if tag == TAG_PROTO_DOWN:
        if party_id != 0:
            raise ProtocolError(f"ProtoDown carries party_id {party_id}, expected 0")
        if first.shape[0] != prior.size:
            raise ProtocolError(f"{first.shape[0]} prototypes but a {prior.size}-class prior")
        msg: RoundMessage = ProtoDown(round_, first, prior)
    else:
        if party_id == 0:
            raise ProtocolError("ReprUp from party 0")
        msg = ReprUp(round_, party_id, first, prior)
    return msg, bytes(data[end:])
