"""Foreman side of a query: planning, dispatch, merge, and CTAS writes.

Virtual time is accounted per phase. Planning covers flattening (with
optional greedy provider resolving), provider selection, peer address
resolution and connection setup; execution covers the header fetch and the
slowest subscan; CTAS adds the write overhead. The three always sum to the
reported total.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .cache import MinervaCache
from .chunkstore import ContentId
from .config import MinervaConfig
from .coordinator import (Assignment, FlattenResult, Strategy, complete_providers, flatten,
                          gpr_resolve, resolve_providers, select_providers)
from .dhtnet import Network, PeerId, RecordKind
from .errors import MinervaError, NotFound, PathError, SchedulingFailure
from .executor import (ChunkSource, PartialResult, Pushdown, RecordBatch, SubScan,
                       _check_columns, _decode, execute_subscan, merge_partials,
                       parse_csv_line, write_table)
from .sql import IpfsPath, QueryAst, QueryKind, parse_query

MAX_CONNECT_RETRIES = 8


@dataclass
class QueryStats:
    plan_ms: float = 0.0
    exec_ms: float = 0.0
    write_ms: float = 0.0
    total_ms: float = 0.0
    dht_lookups: int = 0
    bytes_shipped: int = 0
    rows_returned: int = 0
    rows_scanned: int = 0
    n_chunks: int = 0
    new_cid: ContentId | None = None
    gpr_hit: bool | None = None
    phases: list[tuple[str, float]] = field(default_factory=list)

    def as_row(self) -> dict:
        return {"n_chunks": self.n_chunks, "plan_ms": round(self.plan_ms, 6),
                "exec_ms": round(self.exec_ms, 6), "total_ms": round(self.total_ms, 6),
                "dht_lookups": self.dht_lookups, "bytes_shipped": self.bytes_shipped}


@dataclass
class QueryPlan:
    ast: QueryAst
    source: IpfsPath
    flat: FlattenResult
    assignment: Assignment
    subscans: list[SubScan]
    pushdown: Pushdown
    foreman: PeerId
    plan_ms: float
    lookups: int
    gpr_hit: bool | None = None
    phases: list[tuple[str, float]] = field(default_factory=list)

    def covered_positions(self) -> list[int]:
        return sorted(p for s in self.subscans for p in s.positions)


class Catalog:
    """Name -> (cid, format) table, optionally persisted as a JSON file."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self._lock = threading.Lock()
        self._names: dict[str, tuple[str, str]] = {}
        if self.path is not None and self.path.exists():
            raw = json.loads(self.path.read_text() or "{}")
            self._names = {k: (v["cid"], v["format"]) for k, v in raw.items()}

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    def register(self, name: str, cid: ContentId, fmt: str) -> None:
        with self._lock:
            self._names[name] = (cid.text, fmt)
            if self.path is not None:
                body = {k: {"cid": c, "format": f} for k, (c, f) in sorted(self._names.items())}
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps(body, indent=1))
                tmp.replace(self.path)

    def resolve(self, name: str) -> IpfsPath | None:
        hit = self._names.get(name)
        return None if hit is None else IpfsPath(ContentId.parse(hit[0]), hit[1])

    def names(self) -> list[str]:
        return sorted(self._names)


def pushdown_for(ast: QueryAst) -> Pushdown:
    aggregate = bool(ast.aggregates) or ast.group_by is not None
    projection = None if ast.star or aggregate else tuple(ast.projection)
    return Pushdown(projection, tuple(ast.predicate), tuple(ast.aggregates), ast.group_by)


def _tag(exc: Exception, stage: str) -> Exception:
    if isinstance(exc, MinervaError) and exc.stage is None:
        exc.stage = stage
    return exc


def _address_phase(net: Network, cache: MinervaCache, peers, foreman: PeerId) -> float:
    """Resolve peer addresses not cached, all in parallel. Returns elapsed."""
    now = net.clock
    elapsed = 0.0
    durations = []
    for p in sorted(set(peers)):
        if p == foreman or cache.get_address(p, now) is not None:
            continue
        sample = net.sample()
        durations.append(sample)
        elapsed = max(elapsed, sample)
        try:
            rec = net.lookup(p, RecordKind.ADDRESS, sample)
        except NotFound:
            raise SchedulingFailure(f"no address record for peer {p}") from None
        cache.put_address(p, rec.value, now)
    net.realize(durations)
    return elapsed


def _candidate_peers(flat: FlattenResult, max_providers: int, exclude) -> set[PeerId]:
    out = set()
    for leaf in dict.fromkeys(flat.leaves):
        out.update([p for p in flat.providers.get(leaf, ()) if p not in exclude][:max_providers])
    return out


def resolve_source(ast: QueryAst, catalog: Catalog | None, temp: dict | None) -> IpfsPath:
    src = ast.source
    if src.top_cid is not None:
        return src
    hit = (temp or {}).get(src.name)
    if hit is None and catalog is not None:
        hit = catalog.resolve(src.name)
    if hit is None:
        raise PathError(f"unknown table {src.name!r}", 0)
    return hit


def plan_query(ast: QueryAst, net: Network, cache: MinervaCache, config: MinervaConfig,
               foreman: PeerId, source: IpfsPath | None = None) -> QueryPlan:
    """Flatten, pick providers, reach them, and cut the object into subscans."""
    source = source or ast.source
    if source.top_cid is None:
        raise PathError(f"unresolved table {source.name!r}", 0)
    sched = config.scheduler
    strategy = Strategy(sched.strategy)
    pool = config.flatten.pool_size
    lookups0 = net.lookups
    phases: list[tuple[str, float]] = []
    top = source.top_cid
    gpr_hit = None

    if config.gpr.enabled:
        flat = flatten(net, cache, top, providers=False, pool_size=pool)
        phases.append(("flatten", flat.hash_elapsed))
        outcome = None
        if flat.providers is None:
            outcome = gpr_resolve(net, config.gpr_config(), top, cache=cache, flat=flat,
                                  strategy=strategy, max_providers=sched.max_providers,
                                  foreman=foreman, pool_size=pool)
        if outcome is not None:
            gpr_hit = outcome.hit
            flat = outcome.flat
            if not outcome.hit:
                phases.append(("gpr_fallback", outcome.extra_elapsed))
        elif flat.providers is None:
            flat = complete_providers(net, cache, flat, pool)
            phases.append(("providers", flat.provider_elapsed))
    else:
        flat = flatten(net, cache, top, providers=True, pool_size=pool)
        phases.append(("flatten", flat.hash_elapsed))
        phases.append(("providers", flat.provider_elapsed))

    failed: set[PeerId] = set()
    for _ in range(MAX_CONNECT_RETRIES + 1):
        if gpr_hit and not failed:
            assignment = outcome.assignment
            phases.append(("addresses", _address_phase(net, cache, [flat.host], foreman)))
        else:
            if strategy is Strategy.RESPONSE_PRIORITY:
                # addresses are needed before peers can be probed
                cands = _candidate_peers(flat, sched.max_providers, failed)
                phases.append(("addresses", _address_phase(net, cache, cands, foreman)))
            assignment = select_providers(flat, strategy, sched.max_providers, net=net,
                                          foreman=foreman, exclude=failed)
            if strategy is Strategy.RESPONSE_PRIORITY:
                phases.append(("probe", assignment.elapsed))
            else:
                chosen = set(assignment.chosen.values())
                phases.append(("addresses", _address_phase(net, cache, chosen, foreman)))
        down = sorted({p for p in assignment.chosen.values()
                       if p != foreman and not net.peer(p).online})
        if not down:
            break
        phases.append(("connect_timeout", net.connect_timeout_ms))
        failed.update(down)
        cache.invalidate_meta(top)
        affected = [leaf for leaf, p in assignment.chosen.items() if p in failed]
        found, elapsed, _ = resolve_providers(net, affected, pool)
        phases.append(("providers_retry", elapsed))
        providers = dict(flat.providers or {leaf: (p,) for leaf, p in assignment.chosen.items()})
        providers.update(found)
        flat = FlattenResult(flat.top, flat.leaves, providers, flat.rounds, flat.lookups,
                             flat.elapsed, flat.hash_elapsed, flat.provider_elapsed,
                             flat.hash_rounds, flat.host, flat.size)
    else:
        raise SchedulingFailure(f"gave up after {MAX_CONNECT_RETRIES} connection retries")

    pushdown = pushdown_for(ast)
    by_peer: dict[PeerId, list[int]] = {}
    for pos, leaf in enumerate(flat.leaves):
        by_peer.setdefault(assignment.chosen[leaf], []).append(pos)
    subscans = []
    for peer_id, positions in by_peer.items():
        raw = not net.peer(peer_id).has_executor
        target = foreman if raw else peer_id
        subscans.append(SubScan(target, positions, list(flat.leaves), source.format,
                                None, pushdown, dict(assignment.chosen), raw))
    plan_ms = sum(t for _, t in phases)
    return QueryPlan(ast, source, flat, assignment, subscans, pushdown, foreman, plan_ms,
                     net.lookups - lookups0, gpr_hit, phases)


def fetch_header(net: Network, plan: QueryPlan) -> tuple[list[str], int]:
    """Read the CSV header line at the foreman. Returns (columns, bytes pulled)."""
    source = ChunkSource(plan.flat.leaves, net.peer(plan.foreman).store, net,
                         plan.assignment.chosen)
    line = b""
    for pos in range(len(plan.flat.leaves)):
        part, done = source.read_until_newline(pos)
        line += part
        if done:
            break
    return parse_csv_line(_decode(line, 1), 1) if line.strip() else [], source.fetched_bytes


def _final_projection(batch: RecordBatch, ast: QueryAst) -> RecordBatch:
    names = ast.output_names
    if names is None or list(batch.columns) == names:
        return batch
    idx = [batch.columns.index(n) for n in names]
    return RecordBatch(list(names), [batch.types[i] for i in idx],
                       [tuple(r[i] for i in idx) for r in batch.rows])


def execute_plan(net: Network, plan: QueryPlan) -> tuple[RecordBatch, float, int, int]:
    """Run every subscan; returns (merged batch, elapsed, bytes shipped, rows scanned)."""
    columns = None
    header_ms = 0.0
    shipped = 0
    if plan.source.format == "csv":
        columns, header_bytes = fetch_header(net, plan)
        header_ms = net.transfer_ms(header_bytes)
        shipped += header_bytes
        _check_columns(plan.pushdown, columns)
    partials: list[PartialResult] = []
    slowest = 0.0
    for sub in plan.subscans:
        sub.columns = columns
        part = execute_subscan(net, sub.target_peer, sub, plan.foreman)
        partials.append(part)
        slowest = max(slowest, part.elapsed)
        shipped += part.nbytes + part.fetched_bytes
    batch = merge_partials(partials, plan.pushdown, columns)
    batch = _final_projection(batch, plan.ast)
    if plan.ast.limit is not None:
        batch = RecordBatch(batch.columns, batch.types, batch.rows[:plan.ast.limit])
    return batch, header_ms + slowest, shipped, sum(p.rows_scanned for p in partials)


class Session:
    """One foreman with its caches, temporary tables and the shared catalog."""

    def __init__(self, net: Network, config: MinervaConfig | None = None,
                 cache: MinervaCache | None = None, catalog: Catalog | None = None,
                 foreman: PeerId | None = None):
        self.net = net
        self.config = config or MinervaConfig()
        self.cache = cache or MinervaCache(self.config.cache_config(),
                                           self.config.cache.meta_enabled,
                                           self.config.cache.peer_enabled)
        self.catalog = catalog if catalog is not None else Catalog(self.config.catalog.path or None)
        peers = list(net.peers)
        self.foreman = foreman or peers[min(self.config.net.foreman, len(peers) - 1)]
        self.temp_tables: dict[str, IpfsPath] = {}

    def plan(self, sql: str | QueryAst) -> QueryPlan:
        ast = parse_query(sql) if not isinstance(sql, QueryAst) else sql
        source = resolve_source(ast, self.catalog, self.temp_tables)
        return plan_query(ast, self.net, self.cache, self.config, self.foreman, source)

    def run(self, sql: str | QueryAst) -> tuple[RecordBatch, QueryStats]:
        ast = parse_query(sql) if not isinstance(sql, QueryAst) else sql
        net = self.net
        lookups0 = net.lookups
        try:
            source = resolve_source(ast, self.catalog, self.temp_tables)
            plan = plan_query(ast, net, self.cache, self.config, self.foreman, source)
        except MinervaError as exc:
            raise _tag(exc, "plan")
        try:
            batch, exec_ms, shipped, scanned = execute_plan(net, plan)
        except MinervaError as exc:
            raise _tag(exc, "execute")
        stats = QueryStats(plan_ms=plan.plan_ms, exec_ms=exec_ms, bytes_shipped=shipped,
                           rows_returned=len(batch), rows_scanned=scanned,
                           n_chunks=len(plan.flat.leaves), gpr_hit=plan.gpr_hit,
                           phases=list(plan.phases) + [("execute", exec_ms)])
        if ast.kind is not QueryKind.SELECT:
            try:
                cfg = self.config
                written = write_table(net, self.foreman, batch, cfg.chunk.size, source.format,
                                      fanout=cfg.merkle.fanout, cost=cfg.write_cost(),
                                      oversize=cfg.write.oversize)
            except MinervaError as exc:
                raise _tag(exc, "write")
            stats.write_ms = written.elapsed
            stats.new_cid = written.cid
            stats.phases.append(("write", written.elapsed))
            target = IpfsPath(written.cid, source.format)
            if ast.kind is QueryKind.CTTAS:
                self.temp_tables[ast.target_name] = target
            else:
                self.catalog.register(ast.target_name, written.cid, source.format)
        stats.total_ms = stats.plan_ms + stats.exec_ms + stats.write_ms
        stats.dht_lookups = net.lookups - lookups0
        net.advance(net.clock + stats.total_ms)
        return batch, stats


def run_query(text: str, net: Network, config: MinervaConfig | None = None,
              cache: MinervaCache | None = None, *, session: Session | None = None
              ) -> tuple[RecordBatch, QueryStats]:
    """Parse, plan, execute (and write, for CTAS) one statement."""
    session = session or Session(net, config, cache)
    return session.run(text)


def format_table(batch: RecordBatch, max_rows: int | None = None) -> str:
    from .executor import format_value

    rows = batch.rows if max_rows is None else batch.rows[:max_rows]
    cells = [list(batch.columns)] + [["NULL" if v is None else format_value(v) for v in r]
                                     for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(batch.columns))]
    lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines)
