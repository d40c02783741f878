"""Control-plane messages and their wire framing.

Bulk data (models, deltas, checkpoints) travels through the blob store; the
control plane exchanges small framed messages:

    tag u8 | version u8 | length u32 (payload bytes) | JSON payload | crc32 u32

Integers are little-endian. Every variant round-trips exactly through
encode/decode.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

WIRE_VERSION = 1

_FRAME_HEAD = struct.Struct("<BBI")
_FRAME_CRC = struct.Struct("<I")


class MessageError(Exception):
    pass


class UnknownTagError(MessageError):
    pass


class WireVersionError(MessageError):
    pass


class FrameLengthError(MessageError):
    pass


class FrameCrcError(MessageError):
    pass


@dataclass(frozen=True)
class TrainTask:
    """Per-client instructions for one round."""

    round: int
    client_id: int
    local_steps: int
    schedule_offset: int
    batch_size: int
    micro_batches: int
    seeds: dict[str, int]
    blob_key: str  # where the round's global model was published


@dataclass(frozen=True)
class UpdateReady:
    round: int
    client_id: int
    n_k: int
    blob_key: str  # where the client published its update


@dataclass(frozen=True)
class Join:
    node_manager_id: str
    worker_slots: int


@dataclass(frozen=True)
class Leave:
    node_manager_id: str


@dataclass(frozen=True)
class Heartbeat:
    id: str
    round: int


ControlMessage = TrainTask | UpdateReady | Join | Leave | Heartbeat

_TAGS: dict[type, int] = {TrainTask: 1, UpdateReady: 2, Join: 3, Leave: 4, Heartbeat: 5}
_BY_TAG = {tag: cls for cls, tag in _TAGS.items()}


def encode_message(msg: ControlMessage) -> bytes:
    tag = _TAGS.get(type(msg))
    if tag is None:
        raise UnknownTagError(f"not a control message: {type(msg).__name__}")
    payload = json.dumps(asdict(msg), sort_keys=True).encode("utf-8")
    return (
        _FRAME_HEAD.pack(tag, WIRE_VERSION, len(payload))
        + payload
        + _FRAME_CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF)
    )


def decode_message(frame: bytes) -> ControlMessage:
    if len(frame) < _FRAME_HEAD.size:
        raise FrameLengthError(f"frame of {len(frame)} bytes is shorter than the header")
    tag, version, length = _FRAME_HEAD.unpack_from(frame)
    expected = _FRAME_HEAD.size + length + _FRAME_CRC.size
    if len(frame) != expected:
        raise FrameLengthError(f"frame is {len(frame)} bytes, header promises {expected}")
    if version != WIRE_VERSION:
        raise WireVersionError(f"unsupported wire version {version}")
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise UnknownTagError(f"unknown message tag {tag}")
    payload = frame[_FRAME_HEAD.size : _FRAME_HEAD.size + length]
    (crc,) = _FRAME_CRC.unpack_from(frame, _FRAME_HEAD.size + length)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FrameCrcError("frame payload failed its crc32 check")
    try:
        fields = json.loads(payload.decode("utf-8"))
        return cls(**fields)
    except (ValueError, TypeError) as exc:
        raise MessageError(f"malformed payload for {cls.__name__}: {exc}") from exc
