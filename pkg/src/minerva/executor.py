"""Per-node subscan execution: stitched record reading, pushdown, partial
aggregation, and the record-aligned table writer.

Records are newline-terminated lines (CSV rows or NDJSON objects). A record
belongs to the chunk holding its first byte; a subscan that ends mid-record
reads ahead into the following chunk until the newline.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import operator
import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

from .chunkstore import BlockStore, Chunk, ContentId
from .dhtnet import Network, Peer, PeerId, publish_object
from .errors import InvalidArgument, NotFound, ParseError, PlanError, TransferFailure
from .merkle import MerkleTree, build_fat_tree

FORMATS = ("csv", "json")

_INT = re.compile(r"[+-]?\d+\Z")
_FLOAT = re.compile(r"[+-]?(\d+\.\d*|\.\d+|\d+)([eE][+-]?\d+)?\Z|[+-]?(inf|nan)\Z", re.I)


# -- values and batches -------------------------------------------------------

@functools.lru_cache(maxsize=1 << 16)
def parse_scalar(token: str):
    """Narrowest value for one CSV field. Empty fields are null."""
    if token == "":
        return None
    low = token.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    if _INT.match(token):
        return int(token)
    if _FLOAT.match(token):
        return float(token)
    return token


def value_type(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "boolean"
    if isinstance(v, int):
        return "integer"
    if isinstance(v, float):
        return "float"
    return "text"


def promote(a: str, b: str) -> str:
    if a == b or b == "null":
        return a
    if a == "null":
        return b
    if {a, b} == {"integer", "float"}:
        return "float"
    return "text"


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return str(v)


@dataclass
class RecordBatch:
    columns: list[str]
    types: list[str]
    rows: list[tuple]

    @classmethod
    def from_rows(cls, columns: Sequence[str], rows: Iterable[Sequence]) -> "RecordBatch":
        """Infer per-column types and coerce values to them."""
        rows = [tuple(r) for r in rows]
        ncol = len(columns)
        types = ["null"] * ncol
        for r in rows:
            if len(r) != ncol:
                raise ParseError(f"row has {len(r)} fields, schema has {ncol}")
            for i, v in enumerate(r):
                types[i] = promote(types[i], value_type(v))
        if "float" in types or "text" in types:
            conv = []
            for t in types:
                if t == "float":
                    conv.append(lambda v: float(v) if v is not None else None)
                elif t == "text":
                    conv.append(lambda v: format_value(v) if v is not None else None)
                else:
                    conv.append(None)
            rows = [tuple(v if c is None else c(v) for v, c in zip(r, conv)) for r in rows]
        return cls(list(columns), types, rows)

    @classmethod
    def empty(cls, columns: Sequence[str] = ()) -> "RecordBatch":
        return cls(list(columns), ["null"] * len(columns), [])

    @property
    def schema(self) -> list[tuple[str, str]]:
        return list(zip(self.columns, self.types))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def encoded_size(rows: Iterable[Sequence]) -> int:
    """Bytes of the rows as comma-separated lines (used for shipping cost)."""
    return sum(sum(len(format_value(v)) for v in r) + max(len(r) - 1, 0) + 1 for r in rows)


# -- pushdown description -----------------------------------------------------

_OPS: dict[str, Callable] = {
    "=": operator.eq, "!=": operator.ne, "<>": operator.ne,
    "<": operator.lt, "<=": operator.le, ">": operator.gt, ">=": operator.ge,
}


@dataclass(frozen=True)
class Comparison:
    column: str
    op: str
    value: object

    def __post_init__(self):
        if self.op not in _OPS:
            raise PlanError(f"unsupported comparison operator {self.op!r}")

    def test(self, v) -> bool:
        # SQL-ish: null never matches; incomparable types never match.
        if v is None or self.value is None:
            return False
        if isinstance(v, bool) != isinstance(self.value, bool):
            return self.op in ("!=", "<>")
        try:
            return bool(_OPS[self.op](v, self.value))
        except TypeError:
            return self.op in ("!=", "<>")


AGG_FUNCS = ("count", "sum", "min", "max")


@dataclass(frozen=True)
class Aggregate:
    func: str
    column: str | None  # None for count(*)
    alias: str | None = None

    def __post_init__(self):
        if self.func not in AGG_FUNCS:
            raise PlanError(f"unsupported aggregate {self.func!r}")
        if self.column is None and self.func != "count":
            raise PlanError(f"{self.func}(*) is not supported")

    @property
    def name(self) -> str:
        return self.alias or f"{self.func}({self.column or '*'})"


@dataclass(frozen=True)
class Pushdown:
    projection: tuple[str, ...] | None = None  # None means every column
    predicate: tuple[Comparison, ...] = ()
    aggregates: tuple[Aggregate, ...] = ()
    group_by: str | None = None

    @property
    def is_aggregate(self) -> bool:
        return bool(self.aggregates) or self.group_by is not None

    def referenced(self) -> set[str]:
        cols = {c.column for c in self.predicate}
        cols.update(a.column for a in self.aggregates if a.column)
        if self.group_by:
            cols.add(self.group_by)
        if self.projection and not self.aggregates:
            cols.update(self.projection)
        return cols


# -- aggregation state ---------------------------------------------------------

def _acc_init(func: str):
    return 0 if func == "count" else None


def _acc_add(func: str, acc, v):
    if func == "count":
        return acc + 1
    if v is None:
        return acc
    if acc is None:
        return v
    if func == "sum":
        return acc + v
    if func == "min":
        return v if v < acc else acc
    return v if v > acc else acc


def _acc_merge(func: str, a, b):
    if func == "count":
        return a + b
    if a is None:
        return b
    if b is None:
        return a
    if func == "sum":
        return a + b
    if func == "min":
        return b if b < a else a
    return b if b > a else a


@dataclass
class AggState:
    """Group key -> accumulator list. ``()`` is the key when nothing is grouped."""

    aggregates: tuple[Aggregate, ...]
    group_by: str | None = None
    groups: dict[tuple, list] = field(default_factory=dict)

    def add(self, key: tuple, values: Sequence) -> None:
        accs = self.groups.get(key)
        if accs is None:
            accs = self.groups[key] = [_acc_init(a.func) for a in self.aggregates]
        for i, (agg, v) in enumerate(zip(self.aggregates, values)):
            if agg.func == "count" and agg.column is not None and v is None:
                continue
            accs[i] = _acc_add(agg.func, accs[i], v)

    def merge(self, other: "AggState") -> "AggState":
        out = AggState(self.aggregates, self.group_by, {k: list(v) for k, v in self.groups.items()})
        for key, accs in other.groups.items():
            mine = out.groups.get(key)
            if mine is None:
                out.groups[key] = list(accs)
            else:
                out.groups[key] = [_acc_merge(a.func, x, y)
                                   for a, x, y in zip(self.aggregates, mine, accs)]
        return out

    def nbytes(self) -> int:
        return encoded_size(list(k) + list(v) for k, v in self.groups.items())

    def finalize(self) -> RecordBatch:
        names = [a.name for a in self.aggregates]
        if self.group_by is None:
            accs = self.groups.get(()) or [_acc_init(a.func) for a in self.aggregates]
            return RecordBatch.from_rows(names, [tuple(accs)])
        rows = [key + tuple(accs) for key, accs in self.groups.items()]
        return RecordBatch.from_rows([self.group_by] + names, rows)


@dataclass
class PartialResult:
    batch: RecordBatch | None = None
    agg: AggState | None = None
    rows_scanned: int = 0
    nbytes: int = 0  # result bytes shipped to the foreman (0 if local)
    fetched_bytes: int = 0  # neighbour or raw chunk bytes pulled over the network
    elapsed: float = 0.0
    peer: PeerId | None = None


# -- reading -------------------------------------------------------------------

class ChunkSource:
    """Reads object chunks by position for one executing peer.

    Chunks missing from the local store are pulled from the peer named in
    ``sources`` and counted in ``fetched_bytes``.
    """

    def __init__(self, leaves: Sequence[ContentId], store: BlockStore,
                 net: Network | None = None, sources: dict[ContentId, PeerId] | None = None):
        self.leaves = list(leaves)
        self.store = store
        self.net = net
        self.sources = sources or {}
        self.fetched_bytes = 0

    def _remote(self, cid: ContentId) -> bytes:
        src = self.sources.get(cid)
        if self.net is None or src is None:
            raise NotFound(cid, f"chunk {cid} neither local nor fetchable")
        peer = self.net.peers[src]
        if not peer.online:
            raise TransferFailure(f"provider {src} offline while fetching {cid}")
        return peer.store.get(cid)

    def read(self, pos: int) -> bytes:
        cid = self.leaves[pos]
        if self.store.has(cid):
            return self.store.get(cid)
        data = self._remote(cid)
        self.fetched_bytes += len(data)
        return data

    def read_until_newline(self, pos: int) -> tuple[bytes, bool]:
        """Prefix of a chunk up to (excluding) its first newline; only that is charged."""
        cid = self.leaves[pos]
        local = self.store.has(cid)
        data = self.store.get(cid) if local else self._remote(cid)
        nl = data.find(b"\n")
        part = data if nl < 0 else data[:nl]
        if not local:
            self.fetched_bytes += len(part) + (nl >= 0)
        return part, nl >= 0

    def last_byte(self, pos: int) -> bytes:
        cid = self.leaves[pos]
        if self.store.has(cid):
            return self.store.get(cid)[-1:]
        data = self._remote(cid)
        self.fetched_bytes += 1
        return data[-1:]


def run_lines(source: ChunkSource, first: int, last: int) -> Iterator[bytes]:
    """Lines whose first byte lies in chunks ``first..last`` (inclusive)."""
    n = len(source.leaves)
    skipping = first > 0 and source.last_byte(first - 1) != b"\n"
    buf = b""
    for pos in range(first, last + 1):
        data = source.read(pos)
        if skipping:
            nl = data.find(b"\n")
            if nl < 0:
                continue
            data = data[nl + 1:]
            skipping = False
        if not data:
            continue
        buf += data
        lines = buf.split(b"\n")
        buf = lines.pop()
        yield from lines
    if skipping or not buf:
        return
    pos = last + 1
    while pos < n:
        part, done = source.read_until_newline(pos)
        buf += part
        pos += 1
        if done:
            break
    yield buf


def _contiguous_runs(positions: Sequence[int]) -> list[tuple[int, int]]:
    runs = []
    for p in sorted(positions):
        if runs and p == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], p)
        else:
            runs.append((p, p))
    return runs


def _decode(line: bytes, lineno: int) -> str:
    try:
        return line.decode("utf-8").rstrip("\r")
    except UnicodeDecodeError as exc:
        raise ParseError(f"invalid utf-8: {exc}", lineno) from None


def parse_csv_line(text: str, lineno: int) -> list[str]:
    try:
        rows = list(csv.reader([text], strict=True))
    except csv.Error as exc:
        raise ParseError(f"malformed csv: {exc}", lineno) from None
    return rows[0] if rows else []


def parse_json_line(text: str, lineno: int) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed json: {exc.msg}", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("json record is not an object", lineno)
    return obj


def iter_records(source: ChunkSource, positions: Sequence[int], fmt: str,
                 columns: Sequence[str] | None = None,
                 wanted: set[str] | None = None) -> Iterator[dict]:
    """Parse the records owned by ``positions`` into dicts, streaming.

    For CSV the header line (first line of the object) is skipped; its
    column names come from ``columns`` or, failing that, the header itself.
    ``wanted`` limits which CSV fields are converted to values.
    """
    if fmt not in FORMATS:
        raise ParseError(f"unknown format {fmt!r}")
    lineno = 0
    picks = None
    for first, last in _contiguous_runs(positions):
        header_pending = fmt == "csv" and first == 0
        for raw in run_lines(source, first, last):
            lineno += 1
            text = _decode(raw, lineno)
            if not text.strip():
                continue
            if fmt == "json":
                yield parse_json_line(text, lineno)
                continue
            if '"' in text or "\r" in text:
                fields = parse_csv_line(text, lineno)
            else:
                fields = text.split(",")
            if header_pending:
                header_pending = False
                if columns is None:
                    columns = fields
                continue
            if columns is None:
                raise ParseError("csv columns unknown: header not supplied", lineno)
            if len(fields) != len(columns):
                raise ParseError(f"expected {len(columns)} fields, got {len(fields)}", lineno)
            if picks is None:
                picks = [(i, c) for i, c in enumerate(columns) if wanted is None or c in wanted]
            yield {c: parse_scalar(fields[i]) for i, c in picks}


def read_header(source: ChunkSource) -> list[str]:
    """First line of a CSV object as column names."""
    for raw in run_lines(source, 0, 0):
        return parse_csv_line(_decode(raw, 1), 1)
    return []


def _rows_to_batch(records: list[dict], columns: Sequence[str] | None) -> RecordBatch:
    if columns is None:
        seen: dict[str, None] = {}
        for r in records:
            for k in r:
                seen.setdefault(k, None)
        columns = list(seen)
    return RecordBatch.from_rows(columns, [tuple(r.get(c) for c in columns) for r in records])


def read_records(store: BlockStore, leaf_cids: Sequence[ContentId], fmt: str,
                 columns: Sequence[str] | None = None) -> RecordBatch:
    """Parse a whole object held in ``store`` into a batch."""
    source = ChunkSource(leaf_cids, store)
    if fmt == "csv" and columns is None:
        columns = read_header(source)
    records = list(iter_records(source, range(len(leaf_cids)), fmt, columns))
    return _rows_to_batch(records, columns)


# -- subscans ------------------------------------------------------------------

@dataclass
class SubScan:
    target_peer: PeerId
    positions: list[int]  # indices into ``object_leaves``
    object_leaves: list[ContentId]
    fmt: str
    columns: list[str] | None = None  # CSV header, shipped by the foreman
    pushdown: Pushdown = Pushdown()
    sources: dict[ContentId, PeerId] = field(default_factory=dict)
    raw: bool = False  # provider lacks an executor: run at the foreman on shipped bytes

    @property
    def leaf_cids(self) -> list[ContentId]:
        return [self.object_leaves[p] for p in self.positions]


def _check_columns(pushdown: Pushdown, columns: Sequence[str] | None) -> None:
    if columns is None:
        return
    unknown = sorted(pushdown.referenced() - set(columns))
    if unknown:
        raise PlanError(f"unknown column(s): {', '.join(unknown)}")


def execute_subscan(net: Network, peer: Peer | PeerId, subscan: SubScan,
                    foreman: PeerId | None = None) -> PartialResult:
    """Scan, filter, project and partially aggregate on ``peer``.

    Elapsed is records scanned times the peer's compute cost, plus the
    transfer of any bytes pulled in and of the result (if not local).
    """
    if isinstance(peer, str):
        peer = net.peer(peer)
    pd = subscan.pushdown
    _check_columns(pd, subscan.columns)
    source = ChunkSource(subscan.object_leaves, peer.store, net, subscan.sources)
    preds = pd.predicate
    scanned = 0
    kept: list[dict] = []
    agg = AggState(pd.aggregates, pd.group_by) if pd.is_aggregate else None
    wanted = pd.referenced() if pd.is_aggregate or pd.projection else None
    for rec in iter_records(source, subscan.positions, subscan.fmt, subscan.columns, wanted):
        scanned += 1
        if preds and not all(c.test(rec.get(c.column)) for c in preds):
            continue
        if agg is not None:
            key = (rec.get(pd.group_by),) if pd.group_by else ()
            agg.add(key, [rec.get(a.column) if a.column else None for a in pd.aggregates])
        else:
            kept.append(rec)
    if agg is not None:
        result = PartialResult(agg=agg, rows_scanned=scanned)
        nbytes = agg.nbytes()
    else:
        cols = list(pd.projection) if pd.projection else subscan.columns
        batch = _rows_to_batch(kept, cols)
        result = PartialResult(batch=batch, rows_scanned=scanned)
        nbytes = encoded_size(batch.rows)
    local = foreman is None or peer.peer_id == foreman
    result.nbytes = 0 if local else nbytes
    result.fetched_bytes = source.fetched_bytes
    result.elapsed = (scanned * peer.compute_cost
                      + net.transfer_ms(source.fetched_bytes + result.nbytes))
    result.peer = peer.peer_id
    return result


def fetch_raw(net: Network, foreman: PeerId, leaf_cids: Sequence[ContentId],
              sources: dict[ContentId, PeerId]) -> tuple[dict[ContentId, bytes], float]:
    """Ship raw chunks to the foreman. Elapsed is total bytes over the link rate."""
    out = {}
    total = 0
    local = net.peer(foreman).store
    for cid in leaf_cids:
        if local.has(cid):
            out[cid] = local.get(cid)
            continue
        src = sources.get(cid)
        if src is None:
            raise NotFound(cid, f"no source for chunk {cid}")
        peer = net.peer(src)
        if not peer.online:
            raise TransferFailure(f"provider {src} offline")
        out[cid] = peer.store.get(cid)
        total += len(out[cid])
    return out, net.transfer_ms(total)


def merge_partials(partials: Iterable[PartialResult], pushdown: Pushdown,
                   columns: Sequence[str] | None = None) -> RecordBatch:
    """Combine worker results at the foreman (order-independent)."""
    partials = list(partials)
    if pushdown.is_aggregate:
        state = AggState(pushdown.aggregates, pushdown.group_by)
        for p in partials:
            state = state.merge(p.agg)
        return state.finalize()
    if pushdown.projection:
        cols = list(pushdown.projection)
    elif columns is not None:
        cols = list(columns)
    else:
        seen: dict[str, None] = {}
        for p in partials:
            for c in p.batch.columns:
                seen.setdefault(c, None)
        cols = list(seen)
    rows = []
    for p in partials:
        idx = [p.batch.columns.index(c) if c in p.batch.columns else None for c in cols]
        rows.extend(tuple(r[i] if i is not None else None for i in idx) for r in p.batch.rows)
    return RecordBatch.from_rows(cols, rows)


# -- writing -------------------------------------------------------------------

@dataclass(frozen=True)
class WriteCost:
    hash_ms_per_block: float = 0.5
    publish_ms: float = 200.0

    def overhead(self, tree: MerkleTree) -> float:
        return self.hash_ms_per_block * (tree.leaf_count + tree.hash_ops) + self.publish_ms


def serialize_records(batch: RecordBatch, fmt: str) -> list[bytes]:
    """One encoded line per record (CSV: header first), newline included."""
    if fmt == "csv":
        out = []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in [batch.columns] + [[format_value(v) for v in r] for r in batch.rows]:
            buf.seek(0)
            buf.truncate()
            w.writerow(row)
            out.append(buf.getvalue().encode("utf-8"))
        return out
    if fmt == "json":
        return [(json.dumps(dict(zip(batch.columns, r)), separators=(",", ":")) + "\n").encode()
                for r in batch.rows]
    raise InvalidArgument(f"unknown format {fmt!r}")


def pack_records(lines: Sequence[bytes], chunk_size: int, oversize: str = "reject") -> list[Chunk]:
    """Greedy record-aligned chunking: no line is split across chunks."""
    if chunk_size < 1:
        raise InvalidArgument("chunk_size must be >= 1")
    chunks, cur, cur_len = [], [], 0
    for line in lines:
        if len(line) > chunk_size:
            if oversize != "oversize":
                raise InvalidArgument(f"record of {len(line)} bytes exceeds chunk size {chunk_size}")
            if cur:
                chunks.append(b"".join(cur))
                cur, cur_len = [], 0
            chunks.append(line)
            continue
        if cur_len + len(line) > chunk_size:
            chunks.append(b"".join(cur))
            cur, cur_len = [], 0
        cur.append(line)
        cur_len += len(line)
    if cur or not chunks:
        chunks.append(b"".join(cur))
    return [Chunk.from_bytes(c) for c in chunks]


@dataclass
class WriteResult:
    cid: ContentId
    tree: MerkleTree
    chunks: list[Chunk]
    elapsed: float
    size: int


def write_table(net: Network, foreman: PeerId, batch: RecordBatch, chunk_size: int,
                fmt: str, *, fanout: int = 8, cost: WriteCost = WriteCost(),
                oversize: str = "reject") -> WriteResult:
    """Store ``batch`` as a new fat-tree object with the foreman as sole provider."""
    chunks = pack_records(serialize_records(batch, fmt), chunk_size, oversize)
    tree = build_fat_tree(chunks, fanout)
    publish_object(net, tree, {c.cid: [foreman] for c in chunks}, chunks, host=foreman)
    return WriteResult(tree.root, tree, chunks, cost.overhead(tree), tree.size)
