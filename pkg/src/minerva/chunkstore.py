"""Byte chunking and per-node content-addressed block storage."""

from __future__ import annotations

import base64
import hashlib
import threading
from dataclasses import dataclass, field
from typing import Iterable

from .errors import IntegrityError, InvalidArgument, NotFound

DEFAULT_CHUNK_SIZE = 1024 * 1024
DIGEST_SIZE = 32

# Multibase-style prefix for lowercase, unpadded base32 text.
_TEXT_PREFIX = "b"
_TEXT_LEN = 1 + 52


class ContentId(bytes):
    """A sha256 digest. Subclasses bytes so hashing and comparison run in C."""

    __slots__ = ()

    def __new__(cls, digest: bytes) -> "ContentId":
        if len(digest) != DIGEST_SIZE:
            raise InvalidArgument(f"digest must be {DIGEST_SIZE} bytes, got {len(digest)}")
        return super().__new__(cls, digest)

    @property
    def digest(self) -> bytes:
        return bytes(self)

    @classmethod
    def of(cls, data: bytes) -> "ContentId":
        return bytes.__new__(cls, hashlib.sha256(data).digest())

    @classmethod
    def parse(cls, text: str) -> "ContentId":
        if len(text) != _TEXT_LEN or not text.startswith(_TEXT_PREFIX):
            raise InvalidArgument(f"malformed content id: {text!r}")
        body = text[1:].upper() + "===="
        try:
            digest = base64.b32decode(body)
        except (ValueError, base64.binascii.Error) as exc:
            raise InvalidArgument(f"malformed content id: {text!r}") from exc
        cid = cls(digest)
        if cid.text != text:
            raise InvalidArgument(f"non-canonical content id: {text!r}")
        return cid

    @property
    def text(self) -> str:
        return _TEXT_PREFIX + base64.b32encode(self).decode("ascii").rstrip("=").lower()

    def __str__(self) -> str:
        return self.text

    def __repr__(self) -> str:
        return f"ContentId({self.text[:12]}...)"


@dataclass(frozen=True)
class Chunk:
    cid: ContentId
    data: bytes

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chunk":
        return cls(ContentId.of(data), bytes(data))

    @property
    def size(self) -> int:
        return len(self.data)


def chunk_bytes(data: bytes, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[Chunk]:
    """Split ``data`` into fixed-size chunks; empty input gives one empty chunk."""
    if chunk_size < 1:
        raise InvalidArgument("chunk_size must be >= 1")
    if not data:
        return [Chunk.from_bytes(b"")]
    view = memoryview(data)
    return [Chunk.from_bytes(view[i:i + chunk_size].tobytes())
            for i in range(0, len(data), chunk_size)]


def join_chunks(chunks: Iterable[Chunk]) -> bytes:
    return b"".join(c.data for c in chunks)


@dataclass
class BlockStore:
    """In-memory block map owned by one peer. Reads are lock-free, writes serialized."""

    node_id: str
    blocks: dict[ContentId, Chunk] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def put(self, chunk: Chunk) -> ContentId:
        if ContentId.of(chunk.data) != chunk.cid:
            raise IntegrityError(f"chunk bytes do not hash to {chunk.cid}")
        with self._lock:
            self.blocks.setdefault(chunk.cid, chunk)
        return chunk.cid

    def get(self, cid: ContentId) -> bytes:
        try:
            return self.blocks[cid].data
        except KeyError:
            raise NotFound(cid, f"block {cid} not in store of {self.node_id}") from None

    def has(self, cid: ContentId) -> bool:
        return cid in self.blocks

    def remove(self, cid: ContentId) -> None:
        with self._lock:
            self.blocks.pop(cid, None)

    def __len__(self) -> int:
        return len(self.blocks)

    def __contains__(self, cid: ContentId) -> bool:
        return cid in self.blocks

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def store_put(store: BlockStore, chunk: Chunk) -> ContentId:
    return store.put(chunk)


def store_get(store: BlockStore, cid: ContentId) -> bytes:
    return store.get(cid)
