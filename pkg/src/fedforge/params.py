"""Flat float32 parameter vectors, layout manifests, and the binary checkpoint container.

Every model, momentum buffer, and checkpoint in the system is built on the
types in this module. Norm and dot accumulations run in float64 so telemetry
is insensitive to summation order at the 1e-12 level.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass
from typing import Any, Iterable, Mapping

import numpy as np

MAGIC = b"FEDP"
FORMAT_VERSION = 1

# Section kind codes of the checkpoint container.
KIND_F32_VECTOR = 0
KIND_U64_SCALAR = 1
KIND_F64_SCALAR = 2
KIND_JSON = 3
# Extension: float64 vectors carry client deltas at full precision so that the
# server can reconstruct client weights bit-exactly from (global, delta).
KIND_F64_VECTOR = 4

_HEADER = struct.Struct("<4sII")  # magic, format_version, section_count
_SECTION_HEAD = struct.Struct("<H")  # name_len
_SECTION_META = struct.Struct("<BQ")  # kind, payload_len
_CRC = struct.Struct("<I")


class ParamError(ValueError):
    """Invalid parameter-vector construction or arithmetic."""


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or a structurally truncated blob."""


class CheckpointVersionError(CheckpointError):
    """Unsupported format version."""


class CheckpointChecksumError(CheckpointError):
    """A section payload failed its CRC32 check."""


def _first_nonfinite(arr: np.ndarray) -> int:
    finite = np.isfinite(arr)
    return int(np.argmin(finite))


def require_finite(arr: np.ndarray, what: str = "vector") -> None:
    """Raise ParamError naming the first offending index if arr has NaN/Inf."""
    if not np.isfinite(arr).all():
        idx = _first_nonfinite(arr)
        raise ParamError(f"non-finite value {arr[idx]!r} in {what} at index {idx}")


class ParamVector:
    """An immutable flat vector of float32 parameters.

    Safe to share across threads. Construction validates finiteness; any
    public operation that could produce NaN/Inf re-validates its output.
    """

    __slots__ = ("_data",)

    def __init__(self, data: Iterable[float] | np.ndarray, *, check: bool = True):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 1:
            raise ParamError(f"expected a 1-D vector, got shape {arr.shape}")
        if arr.size == 0:
            raise ParamError("parameter vector must be non-empty")
        if check:
            require_finite(arr, "parameter vector")
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def zeros(cls, n: int) -> "ParamVector":
        if n <= 0:
            raise ParamError(f"vector length must be positive, got {n}")
        return cls(np.zeros(n, dtype=np.float32), check=False)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamVector":
        return cls(np.frombuffer(raw, dtype="<f4"))

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 view of the underlying storage."""
        return self._data

    def to_bytes(self) -> bytes:
        return self._data.astype("<f4", copy=False).tobytes()

    def as_f64(self) -> np.ndarray:
        return self._data.astype(np.float64)

    def bitwise_equal(self, other: "ParamVector") -> bool:
        if len(self) != len(other):
            return False
        return bool(
            np.array_equal(self._data.view(np.uint32), other._data.view(np.uint32))
        )

    def __len__(self) -> int:
        return int(self._data.size)

    def __repr__(self) -> str:
        return f"ParamVector(len={len(self)})"


def l2_norm(v: ParamVector | np.ndarray) -> float:
    """Euclidean norm accumulated in float64."""
    arr = v.data if isinstance(v, ParamVector) else np.asarray(v)
    if arr.size == 0:
        raise ParamError("l2_norm of an empty vector")
    require_finite(arr, "l2_norm input")
    acc = arr.astype(np.float64, copy=False)
    return float(math.sqrt(float(np.dot(acc, acc))))


def axpy(a: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return y + a*x elementwise, computed in float64 and materialized as float32."""
    if len(x) != len(y):
        raise ParamError(f"axpy length mismatch: x has {len(x)}, y has {len(y)}")
    out = (y.as_f64() + float(a) * x.as_f64()).astype(np.float32)
    return ParamVector(out)


@dataclass(frozen=True)
class LayoutEntry:
    tensor_name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


@dataclass(frozen=True)
class LayoutManifest:
    """Ordered tensor layout of a flat parameter vector.

    Offsets are contiguous, non-overlapping element indices; the sum of all
    shape products equals the vector length.
    """

    entries: tuple[LayoutEntry, ...]

    def __post_init__(self):
        running = 0
        for e in self.entries:
            if any(d <= 0 for d in e.shape):
                raise ParamError(f"manifest entry {e.tensor_name!r} has non-positive dim {e.shape}")
            if e.offset != running:
                raise ParamError(
                    f"manifest entry {e.tensor_name!r} offset {e.offset} != expected {running}"
                )
            running += e.size
        if running == 0:
            raise ParamError("manifest describes an empty layout")

    @property
    def total_len(self) -> int:
        last = self.entries[-1]
        return last.offset + last.size

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "entries": [
                {"name": e.tensor_name, "shape": list(e.shape), "offset": e.offset}
                for e in self.entries
            ]
        }

    @classmethod
    def from_json_dict(cls, d: Mapping[str, Any]) -> "LayoutManifest":
        entries = tuple(
            LayoutEntry(x["name"], tuple(int(s) for s in x["shape"]), int(x["offset"]))
            for x in d["entries"]
        )
        return cls(entries)


SectionValue = ParamVector | np.ndarray | int | float | str | dict | list


def _encode_one(name: str, value: SectionValue) -> bytes:
    name_b = name.encode("utf-8")
    if len(name_b) > 0xFFFF:
        raise ParamError(f"section name too long: {name!r}")
    if isinstance(value, ParamVector):
        kind, payload = KIND_F32_VECTOR, value.to_bytes()
    elif isinstance(value, np.ndarray):
        if value.dtype != np.float64 or value.ndim != 1:
            raise ParamError(f"array section {name!r} must be a 1-D float64 array")
        require_finite(value, f"section {name!r}")
        kind, payload = KIND_F64_VECTOR, value.astype("<f8", copy=False).tobytes()
    elif isinstance(value, bool):
        raise ParamError(f"section {name!r}: encode booleans inside a JSON section")
    elif isinstance(value, int):
        if not 0 <= value < 2**64:
            raise ParamError(f"section {name!r}: integer {value} out of u64 range")
        kind, payload = KIND_U64_SCALAR, struct.pack("<Q", value)
    elif isinstance(value, float):
        kind, payload = KIND_F64_SCALAR, struct.pack("<d", value)
    elif isinstance(value, (str, dict, list)):
        kind, payload = KIND_JSON, json.dumps(value, sort_keys=True).encode("utf-8")
    else:
        raise ParamError(f"section {name!r}: unsupported value type {type(value).__name__}")
    return b"".join(
        [
            _SECTION_HEAD.pack(len(name_b)),
            name_b,
            _SECTION_META.pack(kind, len(payload)),
            payload,
            _CRC.pack(zlib.crc32(payload) & 0xFFFFFFFF),
        ]
    )


def encode_sections(sections: Mapping[str, SectionValue]) -> bytes:
    """Serialize named sections into the checkpoint container format."""
    body = b"".join(_encode_one(name, value) for name, value in sections.items())
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(sections)) + body


class _Cursor:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(
                f"truncated blob: needed {n} bytes for {what} at offset {self.pos}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_sections(raw: bytes) -> dict[str, Any]:
    """Parse a checkpoint container, validating magic, version, and per-section CRCs."""
    cur = _Cursor(raw)
    magic, version, count = _HEADER.unpack(cur.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported format version {version}")
    out: dict[str, Any] = {}
    for _ in range(count):
        (name_len,) = _SECTION_HEAD.unpack(cur.take(_SECTION_HEAD.size, "name length"))
        name = cur.take(name_len, "name").decode("utf-8")
        kind, payload_len = _SECTION_META.unpack(cur.take(_SECTION_META.size, "section meta"))
        payload = cur.take(payload_len, f"payload of {name!r}")
        (crc,) = _CRC.unpack(cur.take(_CRC.size, f"crc of {name!r}"))
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointChecksumError(f"checksum mismatch in section {name!r}")
        if kind == KIND_F32_VECTOR:
            out[name] = ParamVector.from_bytes(payload)
        elif kind == KIND_U64_SCALAR:
            out[name] = struct.unpack("<Q", payload)[0]
        elif kind == KIND_F64_SCALAR:
            out[name] = struct.unpack("<d", payload)[0]
        elif kind == KIND_JSON:
            out[name] = json.loads(payload.decode("utf-8"))
        elif kind == KIND_F64_VECTOR:
            out[name] = np.frombuffer(payload, dtype="<f8").copy()
        else:
            raise CheckpointFormatError(f"unknown section kind {kind} in {name!r}")
    if cur.pos != len(raw):
        raise CheckpointFormatError(f"{len(raw) - cur.pos} trailing bytes after last section")
    return out


def write_checkpoint(sections: Mapping[str, SectionValue], path: str | os.PathLike) -> int:
    """Atomically write sections to path; returns the byte length.

    The blob lands under a temporary name and is renamed into place, so a
    crashed writer never leaves a partial file at the destination.
    """
    blob = encode_sections(sections)
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def read_checkpoint(path: str | os.PathLike) -> dict[str, Any]:
    with open(path, "rb") as fh:
        return decode_sections(fh.read())
