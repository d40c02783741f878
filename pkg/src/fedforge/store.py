"""Write-once blob stores for model exchange, with memory and filesystem
backends honoring identical contracts, plus the round/client key scheme.

Keys are write-once: a second put on the same key is a conflict, which gives
idempotent retry semantics after worker crashes and catches round-protocol
bugs (nobody may overwrite a published artifact).
"""

from __future__ import annotations

import os
import re
import tempfile
import threading
from dataclasses import dataclass
from typing import Optional, Protocol


class BlobStoreError(Exception):
    pass


class BlobNotFoundError(BlobStoreError):
    def __init__(self, key: str):
        super().__init__(f"no blob under key {key!r}")
        self.key = key


class BlobExistsError(BlobStoreError):
    def __init__(self, key: str):
        super().__init__(f"key {key!r} already written (blobs are write-once)")
        self.key = key


class BadKeyError(BlobStoreError):
    pass


_KEY_SEGMENT = re.compile(r"^[A-Za-z0-9._-]+$")


def validate_key(key: str) -> str:
    segments = key.split("/")
    if not segments or any(
        not _KEY_SEGMENT.match(s) or s in (".", "..") for s in segments
    ):
        raise BadKeyError(f"malformed blob key {key!r}")
    return key


def global_model_key(round_num: int) -> str:
    return f"round-{round_num}/global"


def client_update_key(round_num: int, client_id: int) -> str:
    return f"round-{round_num}/client-{client_id}"


def server_checkpoint_key(round_num: int) -> str:
    return f"ckpt/server-{round_num}"


@dataclass(frozen=True)
class ParsedKey:
    kind: str  # "global" | "client" | "server_ckpt"
    round: int
    client_id: Optional[int] = None


def parse_key(key: str) -> ParsedKey:
    m = re.fullmatch(r"round-(\d+)/global", key)
    if m:
        return ParsedKey("global", int(m.group(1)))
    m = re.fullmatch(r"round-(\d+)/client-(\d+)", key)
    if m:
        return ParsedKey("client", int(m.group(1)), int(m.group(2)))
    m = re.fullmatch(r"ckpt/server-(\d+)", key)
    if m:
        return ParsedKey("server_ckpt", int(m.group(1)))
    raise BadKeyError(f"unrecognized blob key {key!r}")


class BlobStore(Protocol):
    def put(self, key: str, data: bytes) -> int: ...
    def get(self, key: str) -> bytes: ...
    def list(self, prefix: str = "") -> list[str]: ...
    def exists(self, key: str) -> bool: ...


class MemoryBlobStore:
    """In-process store: a dict behind a lock."""

    def __init__(self):
        self._blobs: dict[str, bytes] = {}
        self._lock = threading.Lock()

    def put(self, key: str, data: bytes) -> int:
        validate_key(key)
        with self._lock:
            if key in self._blobs:
                raise BlobExistsError(key)
            self._blobs[key] = bytes(data)
        return len(data)

    def get(self, key: str) -> bytes:
        with self._lock:
            if key not in self._blobs:
                raise BlobNotFoundError(key)
            return self._blobs[key]

    def list(self, prefix: str = "") -> list[str]:
        with self._lock:
            return sorted(k for k in self._blobs if k.startswith(prefix))

    def exists(self, key: str) -> bool:
        with self._lock:
            return key in self._blobs


class FileBlobStore:
    """Directory-backed store; key segments map to sub-directories.

    Writes land in a temp file and are hard-linked into place, which is both
    atomic and exclusive: concurrent writers to the same key see exactly one
    winner and one BlobExistsError.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = os.fspath(root)
        os.makedirs(self.root, exist_ok=True)

    def _path(self, key: str) -> str:
        validate_key(key)
        return os.path.join(self.root, *key.split("/"))

    def put(self, key: str, data: bytes) -> int:
        path = self._path(key)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=".blob-", dir=os.path.dirname(path))
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            try:
                os.link(tmp, path)
            except FileExistsError:
                raise BlobExistsError(key) from None
        finally:
            os.unlink(tmp)
        return len(data)

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            with open(path, "rb") as fh:
                return fh.read()
        except FileNotFoundError:
            raise BlobNotFoundError(key) from None

    def list(self, prefix: str = "") -> list[str]:
        keys = []
        for dirpath, _dirnames, filenames in os.walk(self.root):
            for name in filenames:
                if name.startswith("."):
                    continue
                rel = os.path.relpath(os.path.join(dirpath, name), self.root)
                key = rel.replace(os.sep, "/")
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)

    def exists(self, key: str) -> bool:
        return os.path.isfile(self._path(key))


def open_store(mode: str, root: Optional[str] = None) -> BlobStore:
    if mode == "memory":
        return MemoryBlobStore()
    if mode == "fs":
        if not root:
            raise BlobStoreError("filesystem store requires a root directory")
        return FileBlobStore(root)
    raise BlobStoreError(f"unknown store mode {mode!r}")
