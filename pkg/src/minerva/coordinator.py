"""Object flattening, provider selection and greedy provider resolving.

All timings are virtual milliseconds relative to the start of the phase.
A node's children are looked up as soon as that node's own lookup returns,
so flattening time follows ``t(node) + max(children)`` along every branch.
"""

from __future__ import annotations

import enum
import heapq
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cache import MetaEntry, MinervaCache
from .chunkstore import ContentId
from .dhtnet import Network, NodeLinks, PeerId, RecordKind
from .errors import (FlattenFailure, InvalidArgument, NotFound, QueryFailure,
                     SchedulingFailure)


class Strategy(str, enum.Enum):
    RANDOM = "random"
    LOAD_BALANCE = "load_balance"
    RESPONSE_PRIORITY = "response_priority"


@dataclass
class FlattenResult:
    top: ContentId
    leaves: list[ContentId]
    providers: dict[ContentId, tuple[PeerId, ...]] | None
    rounds: int
    lookups: int
    elapsed: float
    hash_elapsed: float = 0.0
    provider_elapsed: float = 0.0
    hash_rounds: int = 0
    host: PeerId | None = None
    size: int = 0


@dataclass
class Assignment:
    chosen: dict[ContentId, PeerId]
    workload: dict[PeerId, int]
    strategy: Strategy
    max_providers: int
    elapsed: float = 0.0  # probe time (response priority only)
    probes: int = 0

    def by_peer(self, leaves: Sequence[ContentId]) -> dict[PeerId, list[ContentId]]:
        """Group leaf occurrences by chosen peer, preserving object order."""
        out: dict[PeerId, list[ContentId]] = {}
        for leaf in leaves:
            out.setdefault(self.chosen[leaf], []).append(leaf)
        return out


@dataclass(frozen=True)
class GprConfig:
    alpha: int = 4 * 1024 * 1024  # bytes
    delta: float = 150.0  # sim ms

    def __post_init__(self):
        if self.alpha < 0 or self.delta < 0:
            raise InvalidArgument("gpr alpha and delta must be >= 0")


class _Pool:
    """List scheduler for lookups; ``width=None`` means unbounded."""

    def __init__(self, width: int | None):
        if width is not None and width < 1:
            raise InvalidArgument("pool size must be >= 1")
        self.width = width
        self._free: list[float] = []

    def run(self, ready: float, duration: float) -> float:
        if self.width is None:
            return ready + duration
        if len(self._free) < self.width:
            start = ready
        else:
            start = max(ready, heapq.heappop(self._free))
        end = start + duration
        heapq.heappush(self._free, end)
        return end


def flatten(net: Network, cache: MinervaCache | None, top: ContentId, *,
            providers: bool = True, pool_size: int | None = None,
            now: float | None = None) -> FlattenResult:
    """Resolve ``top`` down to its leaves and, optionally, their providers."""
    now = net.clock if now is None else now
    cache = cache or MinervaCache(meta_enabled=False, peer_enabled=False)
    cached_top = cache.get_meta(top, now)
    if cached_top is not None and (not providers or cached_top.providers is not None):
        known = cached_top.providers
        return FlattenResult(top, list(cached_top.leaves),
                             dict(known) if known is not None else None,
                             0, 0, 0.0, host=cached_top.host, size=cached_top.size)

    pool = _Pool(pool_size)
    links: dict[ContentId, NodeLinks] = {}
    cached: dict[ContentId, MetaEntry] = {}
    known_leaves: set[ContentId] = set()
    hash_done = 0.0
    hash_rounds = 0
    lookups = 0
    durations = []
    seq = 0
    heap = [(0.0, seq, top, 0)]
    queued = {top}
    while heap:
        ready, _, cid, chain = heapq.heappop(heap)
        entry = cached_top if cid == top and cached_top is not None else cache.get_meta(cid, now)
        if entry is not None:
            cached[cid] = entry
            hash_done = max(hash_done, ready)
            continue
        sample = net.sample()
        lookups += 1
        durations.append(sample)
        end = pool.run(ready, sample)
        try:
            rec = net.lookup(cid, RecordKind.NODE, sample)
        except NotFound:
            raise FlattenFailure(cid) from None
        links[cid] = node = rec.value
        hash_done = max(hash_done, end)
        hash_rounds = max(hash_rounds, chain + 1)
        if not node.children:
            known_leaves.add(cid)
        elif node.leaf_children:
            known_leaves.update(node.children)
        else:
            for child in node.children:
                if child not in queued:
                    queued.add(child)
                    seq += 1
                    heapq.heappush(heap, (end, seq, child, chain + 1))

    subtree = _assemble(top, links, cached, known_leaves)
    leaves = list(subtree[top])
    prov: dict[ContentId, tuple[PeerId, ...]] | None = None
    provider_elapsed = 0.0
    provider_round = 0
    if providers:
        prov = {}
        for entry in cached.values():
            if entry.providers:
                prov.update(entry.providers)
        missing = [leaf for leaf in dict.fromkeys(leaves) if leaf not in prov]
        found, provider_elapsed, n = resolve_providers(net, missing, pool_size)
        prov.update(found)
        lookups += n
        provider_round = 1 if missing else 0

    top_links = links.get(top)
    host = top_links.host if top_links else (cached_top.host if cached_top else None)
    size = top_links.size if top_links else (cached_top.size if cached_top else 0)
    for cid, lv in subtree.items():
        if cid in links and links[cid].children:
            sub_prov = {leaf: prov[leaf] for leaf in lv} if prov is not None else None
            cache.put_meta(cid, MetaEntry(tuple(lv), sub_prov, links[cid].host, links[cid].size), now)
    net.realize(durations, pool_size)
    return FlattenResult(top, leaves, prov, hash_rounds + provider_round, lookups,
                         hash_done + provider_elapsed, hash_done, provider_elapsed,
                         hash_rounds, host, size)


def _assemble(top, links, cached, known_leaves) -> dict[ContentId, tuple[ContentId, ...]]:
    """Leaf sequence under every resolved internal node, by post-order walk."""
    out: dict[ContentId, tuple[ContentId, ...]] = {}
    stack = [(top, False)]
    while stack:
        cid, expanded = stack.pop()
        if cid in out:
            continue
        if cid in cached:
            out[cid] = tuple(cached[cid].leaves)
            continue
        node = links.get(cid)
        if node is None:
            if cid in known_leaves:
                out[cid] = (cid,)
                continue
            raise FlattenFailure(cid)
        if not node.children:
            out[cid] = (cid,)
        elif node.leaf_children:
            out[cid] = tuple(node.children)
        elif expanded:
            out[cid] = tuple(leaf for ch in node.children for leaf in out[ch])
        else:
            stack.append((cid, True))
            stack.extend((ch, False) for ch in reversed(node.children) if ch not in out)
    return out


def resolve_providers(net: Network, leaves: Sequence[ContentId], pool_size: int | None = None
                      ) -> tuple[dict[ContentId, tuple[PeerId, ...]], float, int]:
    """One parallel phase of provider lookups. Returns (providers, elapsed, lookups)."""
    pool = _Pool(pool_size)
    found = {}
    elapsed = 0.0
    durations = []
    for leaf in leaves:
        sample = net.sample()
        durations.append(sample)
        elapsed = max(elapsed, pool.run(0.0, sample))
        try:
            found[leaf] = net.lookup(leaf, RecordKind.PROVIDERS, sample).value
        except NotFound:
            raise FlattenFailure(leaf, f"no providers for chunk {leaf}") from None
    net.realize(durations, pool_size)
    return found, elapsed, len(leaves)


def complete_providers(net: Network, cache: MinervaCache | None, flat: FlattenResult,
                       pool_size: int | None = None) -> FlattenResult:
    """Add the provider phase to a hash-only flatten result (no-op if already known)."""
    if flat.providers is not None:
        return flat
    found, elapsed, n = resolve_providers(net, list(dict.fromkeys(flat.leaves)), pool_size)
    if cache is not None:
        cache.put_meta(flat.top, MetaEntry(tuple(flat.leaves), dict(found), flat.host, flat.size),
                       net.clock)
    return FlattenResult(flat.top, flat.leaves, found, flat.rounds + (1 if n else 0),
                         flat.lookups + n, flat.elapsed + elapsed, flat.hash_elapsed, elapsed,
                         flat.hash_rounds, flat.host, flat.size)


# -- provider selection -----------------------------------------------------

def strategy_random(providers_of_leaf: Sequence[PeerId], rng: np.random.Generator) -> PeerId:
    if not providers_of_leaf:
        raise SchedulingFailure("empty provider list")
    return providers_of_leaf[int(rng.integers(len(providers_of_leaf)))]


def strategy_load_balance(providers_of_leaf: Sequence[PeerId], workload: dict[PeerId, int]) -> PeerId:
    """Least-loaded candidate, ties to the lowest peer id; bumps its workload."""
    if not providers_of_leaf:
        raise SchedulingFailure("empty provider list")
    best = min(providers_of_leaf, key=lambda p: (workload.get(p, 0), p))
    workload[best] = workload.get(best, 0) + 1
    return best


def strategy_response_priority(providers_of_leaf: Sequence[PeerId], net: Network,
                               foreman: PeerId | None = None,
                               probe_times: dict[PeerId, float] | None = None) -> PeerId:
    """Earliest responder to a connect probe. The local node answers at time 0."""
    best, _ = _earliest(providers_of_leaf, net, foreman,
                        probe_times if probe_times is not None else {})
    return best


def _probe(peer: PeerId, net: Network, foreman: PeerId | None, times: dict) -> float:
    if peer not in times:
        if peer == foreman:
            times[peer] = 0.0
        elif not net.peer(peer).online:
            times[peer] = math.inf
        else:
            times[peer] = net.probe_sample(peer)
    return times[peer]


def _earliest(cands, net, foreman, times) -> tuple[PeerId, float]:
    if not cands:
        raise SchedulingFailure("empty provider list")
    best = min(cands, key=lambda p: (_probe(p, net, foreman, times), p))
    if math.isinf(times[best]):
        raise SchedulingFailure(f"no provider answered among {list(cands)}")
    return best, times[best]


def candidates(providers: Iterable[PeerId], net: Network | None, max_providers: int,
               exclude: Iterable[PeerId] = ()) -> list[PeerId]:
    """Providers eligible for one leaf: executor-capable first, at most ``max_providers``."""
    exclude = set(exclude)
    pool = [p for p in providers if p not in exclude]
    if net is not None:
        pool.sort(key=lambda p: not net.peers[p].has_executor if p in net.peers else True)
    return pool[:max_providers]


def select_providers(flat: FlattenResult, strategy: Strategy | str, max_providers: int = 3,
                     rng: np.random.Generator | None = None, *, net: Network | None = None,
                     foreman: PeerId | None = None, exclude: Iterable[PeerId] = (),
                     workload: dict[PeerId, int] | None = None) -> Assignment:
    """Pick one provider per leaf with the given strategy."""
    strategy = Strategy(strategy)
    if max_providers < 1:
        raise InvalidArgument("max_providers must be >= 1")
    if flat.providers is None:
        raise InvalidArgument("flatten result carries no providers")
    if strategy is Strategy.RANDOM and rng is None:
        rng = net.rng if net is not None else np.random.default_rng()
    if strategy is Strategy.RESPONSE_PRIORITY and net is None:
        raise InvalidArgument("response priority needs the network to probe")
    exclude = set(exclude)
    workload = {} if workload is None else workload
    chosen: dict[ContentId, PeerId] = {}
    times: dict[PeerId, float] = {}
    wait = 0.0
    for leaf in flat.leaves:
        if leaf in chosen:
            workload[chosen[leaf]] += 1
            continue
        cands = candidates(flat.providers.get(leaf, ()), net, max_providers, exclude)
        if not cands:
            raise SchedulingFailure(f"no usable provider for chunk {leaf}")
        if strategy is Strategy.RANDOM:
            pick = strategy_random(cands, rng)
            workload[pick] = workload.get(pick, 0) + 1
        elif strategy is Strategy.LOAD_BALANCE:
            pick = strategy_load_balance(cands, workload)
        else:
            pick, t = _earliest(cands, net, foreman, times)
            wait = max(wait, t)
            workload[pick] = workload.get(pick, 0) + 1
        chosen[leaf] = pick
    probes = sum(1 for p in times if p != foreman)
    return Assignment(chosen, workload, strategy, max_providers, wait, probes)


# -- greedy provider resolving ------------------------------------------------

@dataclass
class GprOutcome:
    hit: bool
    flat: FlattenResult
    assignment: Assignment
    extra_elapsed: float  # time after hash flattening: 0 on hit, delta + lookups on miss
    provider_elapsed: float = 0.0
    lookups: int = 0


def gpr_resolve(net: Network, cfg: GprConfig, top: ContentId, object_size: int | None = None, *,
                cache: MinervaCache | None = None, flat: FlattenResult | None = None,
                strategy: Strategy | str = Strategy.LOAD_BALANCE, max_providers: int = 3,
                foreman: PeerId | None = None, rng: np.random.Generator | None = None,
                pool_size: int | None = None) -> GprOutcome | None:
    """Assume a small object lives wholly on the peer hosting its top hash.

    Returns None when the object is larger than ``cfg.alpha`` (GPR does not
    apply). On a miss the host reports an error after ``cfg.delta`` and the
    providers of every leaf are looked up in one parallel phase.
    """
    if flat is None:
        flat = flatten(net, cache, top, providers=False, pool_size=pool_size)
    size = flat.size if object_size is None else object_size
    if size > cfg.alpha:
        return None
    host = flat.host
    peer = net.peers.get(host) if host is not None else None
    if peer is not None and peer.online and all(peer.store.has(leaf) for leaf in flat.leaves):
        counts = Counter(flat.leaves)
        assignment = Assignment({leaf: host for leaf in counts}, {host: len(flat.leaves)},
                                Strategy(strategy), max_providers)
        return GprOutcome(True, flat, assignment, 0.0)
    try:
        found, elapsed, n = resolve_providers(net, list(dict.fromkeys(flat.leaves)), pool_size)
        resolved = FlattenResult(flat.top, flat.leaves, found, flat.rounds + 1, flat.lookups + n,
                                 flat.hash_elapsed + cfg.delta + elapsed, flat.hash_elapsed,
                                 elapsed, flat.hash_rounds, host, flat.size)
        assignment = select_providers(resolved, strategy, max_providers, rng, net=net,
                                      foreman=foreman)
    except (FlattenFailure, SchedulingFailure) as exc:
        raise QueryFailure(f"greedy provider fallback failed: {exc}") from exc
    if cache is not None and cache.meta_enabled:
        cache.put_meta(top, MetaEntry(tuple(flat.leaves), dict(found), host, flat.size), net.clock)
    return GprOutcome(False, resolved, assignment, cfg.delta + elapsed, elapsed, n)
