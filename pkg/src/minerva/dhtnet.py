"""Simulated peer network with a latency-sampled global DHT.

Every lookup draws one iid delay from the network's latency law. Time is
virtual: callers compose samples (sum for sequential steps, max for parallel
ones) and advance ``Network.clock`` themselves. Hop-by-hop routing is not
modelled.
"""

from __future__ import annotations

import enum
import hashlib
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import special

from .chunkstore import BlockStore, Chunk, ContentId
from .errors import InvalidArgument, NotFound, TransferFailure
from .merkle import MerkleTree

PeerId = str


class LatencyKind(str, enum.Enum):
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"
    LOGNORMAL = "lognormal"
    EMPIRICAL = "empirical"


@dataclass(frozen=True)
class LatencyDistribution:
    """Per-lookup delay law in milliseconds.

    ``lognormal`` parameters are those of the underlying normal of log(ms).
    """

    kind: LatencyKind
    params: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", LatencyKind(self.kind))
        p = self.params
        if self.kind is LatencyKind.CONSTANT:
            if len(p) != 1 or not p[0] >= 0:
                raise InvalidArgument("constant latency needs one value >= 0")
        elif self.kind is LatencyKind.EXPONENTIAL:
            if len(p) != 1 or not p[0] > 0:
                raise InvalidArgument("exponential latency needs mean > 0")
        elif self.kind is LatencyKind.LOGNORMAL:
            if len(p) != 2 or not p[1] > 0 or not math.isfinite(p[0]):
                raise InvalidArgument("lognormal latency needs finite mu and sigma > 0")
        else:
            if len(p) == 0 or min(p) < 0 or not all(math.isfinite(x) for x in p):
                raise InvalidArgument("empirical latency needs nonnegative samples")

    @classmethod
    def constant(cls, value: float) -> "LatencyDistribution":
        return cls(LatencyKind.CONSTANT, (float(value),))

    @classmethod
    def exponential(cls, mean: float) -> "LatencyDistribution":
        return cls(LatencyKind.EXPONENTIAL, (float(mean),))

    @classmethod
    def lognormal(cls, mu: float, sigma: float) -> "LatencyDistribution":
        return cls(LatencyKind.LOGNORMAL, (float(mu), float(sigma)))

    @classmethod
    def empirical(cls, samples: Iterable[float]) -> "LatencyDistribution":
        return cls(LatencyKind.EMPIRICAL, tuple(sorted(float(s) for s in samples)))

    def sample(self, rng: np.random.Generator, size=None):
        kind, p = self.kind, self.params
        if kind is LatencyKind.CONSTANT:
            return p[0] if size is None else np.full(size, p[0])
        if kind is LatencyKind.EXPONENTIAL:
            return rng.exponential(p[0], size)
        if kind is LatencyKind.LOGNORMAL:
            return rng.lognormal(p[0], p[1], size)
        return rng.choice(np.asarray(p), size)

    @property
    def mean(self) -> float:
        kind, p = self.kind, self.params
        if kind is LatencyKind.CONSTANT or kind is LatencyKind.EXPONENTIAL:
            return p[0]
        if kind is LatencyKind.LOGNORMAL:
            return math.exp(p[0] + p[1] ** 2 / 2)
        return float(np.mean(p))

    @property
    def std(self) -> float:
        kind, p = self.kind, self.params
        if kind is LatencyKind.CONSTANT:
            return 0.0
        if kind is LatencyKind.EXPONENTIAL:
            return p[0]
        if kind is LatencyKind.LOGNORMAL:
            return math.sqrt((math.exp(p[1] ** 2) - 1) * math.exp(2 * p[0] + p[1] ** 2))
        return float(np.std(p))

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        kind, p = self.kind, self.params
        if kind is LatencyKind.CONSTANT:
            return (t >= p[0]).astype(float)
        if kind is LatencyKind.EXPONENTIAL:
            return np.where(t > 0, -np.expm1(-np.maximum(t, 0) / p[0]), 0.0)
        if kind is LatencyKind.LOGNORMAL:
            with np.errstate(divide="ignore"):
                z = (np.log(np.maximum(t, 0)) - p[0]) / (p[1] * math.sqrt(2))
            return np.where(t > 0, 0.5 * special.erfc(-z), 0.0)
        samples = np.asarray(p)
        return np.searchsorted(samples, t, side="right") / len(samples)


def sample_latency(dist: LatencyDistribution, rng: np.random.Generator) -> float:
    return float(dist.sample(rng))


class RecordKind(str, enum.Enum):
    NODE = "node"
    PROVIDERS = "providers"
    ADDRESS = "address"


@dataclass(frozen=True)
class NodeLinks:
    """DHT value for a Merkle node. ``leaf_children`` marks the fat-tree layer
    whose children are leaves by protocol."""

    children: tuple[ContentId, ...]
    leaf_children: bool
    host: PeerId
    size: int = 0


@dataclass(frozen=True)
class DhtRecord:
    key: object
    kind: RecordKind
    value: object


@dataclass
class Peer:
    peer_id: PeerId
    address: str
    store: BlockStore
    has_executor: bool = True
    compute_cost: float = 0.01  # sim ms per record scanned
    online: bool = True
    probe_latency: LatencyDistribution | None = None


def make_peer_id(index: int, seed: int = 0) -> PeerId:
    h = hashlib.sha256(f"peer/{seed}/{index}".encode()).hexdigest()
    return "P" + h[:15]


@dataclass
class Network:
    latency: LatencyDistribution
    rng_seed: int = 0
    bytes_per_ms: float = 12_500.0  # 100 Mbit/s
    connect_timeout_ms: float = 1_000.0
    mode: str = "virtual"
    time_scale: float = 1e-3  # wall seconds per sim ms in wallclock mode
    peers: dict[PeerId, Peer] = field(default_factory=dict)
    provider_table: dict[ContentId, list[PeerId]] = field(default_factory=dict)
    peer_table: dict[PeerId, str] = field(default_factory=dict)
    node_table: dict[ContentId, NodeLinks] = field(default_factory=dict)
    clock: float = 0.0
    lookups: int = 0
    lookups_by_kind: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.rng_seed)
        self._lock = threading.RLock()

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.RLock()

    @classmethod
    def create(cls, n_peers: int, latency: LatencyDistribution, seed: int = 0,
               executor_peers: int | None = None, compute_cost: float = 0.01,
               **kwargs) -> "Network":
        if n_peers < 1:
            raise InvalidArgument("a network needs at least one peer")
        net = cls(latency, seed, **kwargs)
        for i in range(n_peers):
            has_exec = executor_peers is None or i < executor_peers
            net.add_peer(make_peer_id(i, seed), has_executor=has_exec,
                         compute_cost=compute_cost)
        return net

    @property
    def size(self) -> int:
        return len(self.peers)

    def add_peer(self, peer_id: PeerId, address: str | None = None, **kwargs) -> Peer:
        with self._lock:
            if peer_id in self.peers:
                raise InvalidArgument(f"duplicate peer id {peer_id}")
            address = address or f"10.0.{len(self.peers) // 250}.{len(self.peers) % 250 + 1}:4001"
            peer = Peer(peer_id, address, BlockStore(peer_id), **kwargs)
            self.peers[peer_id] = peer
            self.peer_table[peer_id] = address
            return peer

    def peer(self, peer_id: PeerId) -> Peer:
        try:
            return self.peers[peer_id]
        except KeyError:
            raise InvalidArgument(f"unknown peer {peer_id}") from None

    def set_online(self, peer_id: PeerId, online: bool) -> None:
        # Records are left untouched: lookups keep returning the stale entries.
        with self._lock:
            self.peer(peer_id).online = online

    # -- time -------------------------------------------------------------

    def sample(self, n: int | None = None):
        """Draw lookup delays from the shared seeded stream."""
        if n is None:
            return float(self.latency.sample(self.rng))
        return [float(x) for x in self.latency.sample(self.rng, n)] if n else []

    def probe_sample(self, peer_id: PeerId) -> float:
        dist = self.peer(peer_id).probe_latency or self.latency
        return float(dist.sample(self.rng))

    def advance(self, to: float) -> None:
        if to > self.clock:
            self.clock = to

    def transfer_ms(self, nbytes: int) -> float:
        return nbytes / self.bytes_per_ms

    def realize(self, durations: Sequence[float], pool_size: int | None = None) -> None:
        """In wallclock mode, sleep through parallel durations on real threads."""
        if self.mode != "wallclock" or not durations:
            return
        workers = min(len(durations), pool_size or len(durations))
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda d: time.sleep(d * self.time_scale), durations))

    # -- records ----------------------------------------------------------

    def _count(self, kind: RecordKind, n: int = 1) -> None:
        with self._lock:
            self.lookups += n
            self.lookups_by_kind[kind.value] = self.lookups_by_kind.get(kind.value, 0) + n

    def record(self, key, kind: RecordKind) -> DhtRecord | None:
        """Read the global table without charging time (internal use)."""
        kind = RecordKind(kind)
        if kind is RecordKind.NODE:
            value = self.node_table.get(key)
        elif kind is RecordKind.PROVIDERS:
            value = self.provider_table.get(key)
            value = tuple(value) if value else None
        else:
            value = self.peer_table.get(key)
        return None if value is None else DhtRecord(key, kind, value)

    def lookup(self, key, kind: RecordKind, elapsed: float | None = None) -> DhtRecord:
        """One DHT query. ``elapsed`` lets batch callers supply a pre-drawn sample."""
        kind = RecordKind(kind)
        if elapsed is None:
            elapsed = self.sample()
        self._count(kind)
        rec = self.record(key, kind)
        if rec is None:
            raise NotFound(key, f"no {kind.value} record for {key}", elapsed=elapsed)
        return rec

    def connect(self, peer_id: PeerId) -> None:
        if not self.peer(peer_id).online:
            raise TransferFailure(f"connect to {peer_id} timed out after {self.connect_timeout_ms} ms")

    # -- publication --------------------------------------------------------

    def add_provider(self, cid: ContentId, peer_id: PeerId) -> None:
        with self._lock:
            provs = self.provider_table.setdefault(cid, [])
            if peer_id not in provs:
                provs.append(peer_id)


@dataclass(frozen=True)
class LookupResult:
    record: DhtRecord
    elapsed: float


def dht_lookup(net: Network, key, kind: RecordKind = RecordKind.NODE) -> LookupResult:
    """Resolve ``key`` and return the record with the sampled delay.

    Raises NotFound carrying the (nonzero) time spent when the key is absent.
    """
    elapsed = net.sample()
    rec = net.lookup(key, kind, elapsed)
    return LookupResult(rec, elapsed)


PLACEMENTS = ("single", "round_robin", "random", "replicate")


def make_placement(net: Network, leaves: Sequence[ContentId], policy: str = "round_robin",
                   peers: Sequence[PeerId] | None = None, replication: int = 1,
                   rng: np.random.Generator | None = None) -> dict[ContentId, list[PeerId]]:
    """Map each leaf to the peers that will store it.

    ``random`` draws ``replication`` distinct peers per leaf; ``replicate``
    puts every leaf on every peer.
    """
    peers = list(peers if peers is not None else net.peers)
    if not peers:
        raise InvalidArgument("placement needs at least one peer")
    rng = rng if rng is not None else net.rng
    out: dict[ContentId, list[PeerId]] = {}
    for i, leaf in enumerate(leaves):
        if policy == "single":
            chosen = [peers[0]]
        elif policy == "round_robin":
            chosen = [peers[(i + r) % len(peers)] for r in range(min(replication, len(peers)))]
        elif policy == "random":
            idx = rng.choice(len(peers), size=min(replication, len(peers)), replace=False)
            chosen = [peers[j] for j in idx]
        elif policy == "replicate":
            chosen = list(peers)
        else:
            raise InvalidArgument(f"unknown placement policy {policy!r}")
        prev = out.setdefault(leaf, [])
        prev.extend(p for p in chosen if p not in prev)
    return out


def publish_object(net: Network, tree: MerkleTree,
                   placement: Mapping[ContentId, Iterable[PeerId]],
                   chunks: Iterable[Chunk] = (), host: PeerId | None = None) -> None:
    """Store chunks on their peers and publish provider and Merkle node records.

    Internal nodes are hosted by ``host`` (default: first peer of the first leaf).
    """
    leaves = tree.leaves()
    for leaf in leaves:
        peers = list(placement.get(leaf, ()))
        if not peers:
            raise InvalidArgument(f"leaf {leaf} has no placement")
        for p in peers:
            if p not in net.peers:
                raise InvalidArgument(f"placement names unknown peer {p}")
    if host is None:
        host = next(iter(placement[leaves[0]]))
    elif host not in net.peers:
        raise InvalidArgument(f"unknown host peer {host}")

    by_cid = {c.cid: c for c in chunks}
    with net._lock:
        for leaf in dict.fromkeys(leaves):
            chunk = by_cid.get(leaf)
            for p in placement[leaf]:
                if chunk is not None:
                    net.peers[p].store.put(chunk)
                net.add_provider(leaf, p)
        marked = tree.leaf_parents()
        sizes = _subtree_sizes(tree, by_cid)
        for cid, node in tree.nodes.items():
            net.node_table[cid] = NodeLinks(node.children, cid in marked, host, sizes.get(cid, 0))


def _subtree_sizes(tree: MerkleTree, by_cid: Mapping[ContentId, Chunk]) -> dict[ContentId, int]:
    sizes: dict[ContentId, int] = {}
    for level in reversed(tree.levels()):
        for cid in level:
            node = tree.nodes[cid]
            if node.is_leaf:
                c = by_cid.get(cid)
                sizes[cid] = c.size if c is not None else 0
            else:
                sizes[cid] = sum(sizes[ch] for ch in node.children)
    if tree.size and not by_cid:
        sizes[tree.root] = tree.size
    return sizes


def put_object(net: Network, data: bytes, *, chunk_size: int, fanout: int,
               shape: str = "standard", placement: str = "round_robin",
               replication: int = 1, peers: Sequence[PeerId] | None = None,
               host: PeerId | None = None, rng: np.random.Generator | None = None):
    """Chunk raw bytes, index them, place the chunks and publish. Returns the tree."""
    from .chunkstore import chunk_bytes
    from .merkle import build_tree

    chunks = chunk_bytes(data, chunk_size)
    tree = build_tree(chunks, fanout, shape)
    where = make_placement(net, tree.leaves(), placement, peers, replication, rng)
    publish_object(net, tree, where, chunks, host=host)
    return tree
