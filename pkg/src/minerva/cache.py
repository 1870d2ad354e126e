"""LRU caches with lazy TTL expiry, keyed in simulated time."""

from __future__ import annotations

import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Hashable

from .chunkstore import ContentId
from .errors import InvalidArgument

MISS = object()


@dataclass(frozen=True)
class CacheConfig:
    capacity: int = 4096
    ttl: float = 600_000.0  # sim ms (10 minutes)

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidArgument("cache capacity must be >= 1")
        if not self.ttl > 0:
            raise InvalidArgument("cache ttl must be > 0")


class TTLCache:
    """Fixed-capacity LRU map whose entries expire ``ttl`` after insertion.

    A hit refreshes recency but not the insertion time. Expired entries are
    dropped when read, and purged before any LRU eviction on insert.
    """

    def __init__(self, config: CacheConfig = CacheConfig()):
        self.config = config
        self._data: OrderedDict[Hashable, tuple[Any, float]] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._data)

    def __contains__(self, key) -> bool:
        return key in self._data

    def keys(self) -> list:
        """Keys from least to most recently used."""
        return list(self._data)

    def get(self, key, now: float, default=MISS):
        with self._lock:
            entry = self._data.get(key)
            if entry is None:
                self.misses += 1
                return default
            value, inserted_at = entry
            if now - inserted_at > self.config.ttl:
                del self._data[key]
                self.misses += 1
                return default
            self._data.move_to_end(key)
            self.hits += 1
            return value

    def put(self, key, value, now: float):
        """Insert or replace; return the evicted LRU key, if any."""
        with self._lock:
            if key in self._data:
                self._data[key] = (value, now)
                self._data.move_to_end(key)
                return None
            if len(self._data) >= self.config.capacity:
                self._purge_expired(now)
            evicted = None
            if len(self._data) >= self.config.capacity:
                evicted, _ = self._data.popitem(last=False)
            self._data[key] = (value, now)
            return evicted

    def invalidate(self, key) -> None:
        with self._lock:
            self._data.pop(key, None)

    def clear(self) -> None:
        with self._lock:
            self._data.clear()

    def _purge_expired(self, now: float) -> None:
        ttl = self.config.ttl
        for k in [k for k, (_, t) in self._data.items() if now - t > ttl]:
            del self._data[k]


def cache_get(cache: TTLCache, key, now: float, default=MISS):
    return cache.get(key, now, default)


def cache_put(cache: TTLCache, key, value, now: float):
    return cache.put(key, value, now)


@dataclass(frozen=True)
class MetaEntry:
    """Flattened subtree: leaves in order, plus providers once resolved."""

    leaves: tuple[ContentId, ...]
    providers: dict[ContentId, tuple[str, ...]] | None = field(default=None, compare=False)
    host: str | None = None
    size: int = 0


class MinervaCache:
    """Metadata cache (node cid -> leaves/providers) and peer-address cache.

    Either half can be disabled; a disabled half never hits and stores nothing.
    """

    MODES = ("off", "providers_only", "peers_only", "both")

    def __init__(self, config: CacheConfig = CacheConfig(), meta_enabled: bool = True,
                 peer_enabled: bool = True):
        self.meta = TTLCache(config)
        self.peers = TTLCache(config)
        self.meta_enabled = meta_enabled
        self.peer_enabled = peer_enabled

    @classmethod
    def for_mode(cls, mode: str, config: CacheConfig = CacheConfig()) -> "MinervaCache":
        if mode not in cls.MODES:
            raise InvalidArgument(f"unknown cache mode {mode!r}")
        return cls(config, mode in ("providers_only", "both"), mode in ("peers_only", "both"))

    def get_meta(self, cid: ContentId, now: float) -> MetaEntry | None:
        if not self.meta_enabled:
            return None
        hit = self.meta.get(cid, now)
        return None if hit is MISS else hit

    def put_meta(self, cid: ContentId, entry: MetaEntry, now: float) -> None:
        if self.meta_enabled:
            self.meta.put(cid, entry, now)

    def get_address(self, peer_id: str, now: float) -> str | None:
        if not self.peer_enabled:
            return None
        hit = self.peers.get(peer_id, now)
        return None if hit is MISS else hit

    def put_address(self, peer_id: str, address: str, now: float) -> None:
        if self.peer_enabled:
            self.peers.put(peer_id, address, now)

    def invalidate_meta(self, cid: ContentId) -> None:
        self.meta.invalidate(cid)
