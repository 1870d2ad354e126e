"""Recursive-descent parser for the small SQL subset the foreman accepts.

    statement := select | CREATE [TEMPORARY] TABLE target AS select
    select    := SELECT items FROM ipfs.`path` [WHERE cmp (AND cmp)*]
                 [GROUP BY column] [LIMIT n] [;]
    items     := * | item (, item)*
    item      := column | agg '(' (* | column) ')' [[AS] name]
    cmp       := column op literal | literal op column

Paths are ``/ipfs/<cid>#<fmt>`` or ``/ipfs/<cid>/<name>.<fmt>``; a path not
starting with ``/ipfs/`` names a table registered by an earlier CTAS.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

from .chunkstore import ContentId
from .errors import FormatError, InvalidArgument, PathError, QuerySyntaxError
from .executor import AGG_FUNCS, FORMATS, Aggregate, Comparison

KEYWORDS = {"select", "from", "where", "and", "group", "by", "limit", "create",
            "temporary", "temp", "table", "as", "true", "false", "null"}

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>[+-]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<str>'(?:[^']|'')*')
  | (?P<quoted>`[^`]*`)
  | (?P<op><=|>=|!=|<>|=|<|>)
  | (?P<punct>[*,().;])
""", re.X)

_FLIP = {"<": ">", ">": "<", "<=": ">=", ">=": "<=", "=": "=", "!=": "!=", "<>": "<>"}


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int

    @property
    def word(self) -> str:
        return self.text.lower() if self.kind == "ident" else ""


def tokenize(text: str) -> list[Token]:
    out = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup != "ws":
            out.append(Token(m.lastgroup, m.group(), pos))
        pos = m.end()
    out.append(Token("eof", "", len(text)))
    return out


class QueryKind(str, enum.Enum):
    SELECT = "select"
    CTAS = "create_table_as_select"
    CTTAS = "create_temp_table_as_select"


@dataclass(frozen=True)
class IpfsPath:
    top_cid: ContentId | None
    format: str | None
    name: str | None = None  # catalog reference instead of a cid

    @property
    def text(self) -> str:
        if self.top_cid is None:
            return self.name or ""
        return f"/ipfs/{self.top_cid.text}#{self.format}"


@dataclass
class QueryAst:
    kind: QueryKind
    items: list  # str (column) or Aggregate, in output order; empty for *
    source: IpfsPath
    predicate: tuple[Comparison, ...] = ()
    group_by: str | None = None
    limit: int | None = None
    target_name: str | None = None

    @property
    def star(self) -> bool:
        return not self.items

    @property
    def projection(self) -> list[str] | None:
        return None if self.star else [i for i in self.items if isinstance(i, str)]

    @property
    def aggregates(self) -> list[Aggregate]:
        return [i for i in self.items if isinstance(i, Aggregate)]

    @property
    def output_names(self) -> list[str] | None:
        return None if self.star else [i if isinstance(i, str) else i.name for i in self.items]


def parse_path(raw: str, pos: int) -> IpfsPath:
    if not raw.startswith("/ipfs/"):
        if not raw or "#" in raw or "/" in raw:
            raise PathError(f"table path must be /ipfs/<cid>#<format>, got {raw!r}", pos)
        return IpfsPath(None, None, raw)
    rest = raw[len("/ipfs/"):]
    if "#" in rest:
        cid_text, _, fmt = rest.partition("#")
    elif "/" in rest:
        cid_text, _, fname = rest.partition("/")
        if "." not in fname or "/" in fname:
            raise FormatError(f"cannot infer format from {fname!r}", pos)
        fmt = fname.rsplit(".", 1)[1]
    else:
        raise FormatError("missing #<format> suffix on table path", pos)
    fmt = fmt.lower()
    if fmt == "ndjson":
        fmt = "json"
    if fmt not in FORMATS:
        raise FormatError(f"unknown format {fmt!r} (expected csv or json)", pos)
    try:
        cid = ContentId.parse(cid_text)
    except InvalidArgument:
        raise PathError(f"malformed content id {cid_text!r}", pos + 6) from None
    return IpfsPath(cid, fmt)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        raise QuerySyntaxError(f"{msg}, found {found}", tok.pos)

    def advance(self) -> Token:
        t = self.toks[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def at_word(self, *words) -> bool:
        return self.tok.kind == "ident" and self.tok.word in words

    def word(self, *words) -> Token:
        if not self.at_word(*words):
            self.error(f"expected {' or '.join(w.upper() for w in words)}")
        return self.advance()

    def punct(self, ch: str) -> Token:
        if self.tok.kind != "punct" or self.tok.text != ch:
            self.error(f"expected {ch!r}")
        return self.advance()

    def at_punct(self, ch: str) -> bool:
        return self.tok.kind == "punct" and self.tok.text == ch

    def name(self, what: str = "column name") -> str:
        t = self.tok
        if t.kind == "quoted" and len(t.text) > 2:
            self.advance()
            return t.text[1:-1]
        if t.kind == "ident" and t.word not in KEYWORDS:
            self.advance()
            return t.text
        self.error(f"expected {what}")

    # statement level

    def statement(self) -> QueryAst:
        if self.at_word("create"):
            ast = self.create()
        elif self.at_word("select"):
            ast = self.select()
        else:
            self.error("expected SELECT or CREATE")
        if self.at_punct(";"):
            self.advance()
        if self.tok.kind != "eof":
            self.error("unexpected trailing input")
        return ast

    def create(self) -> QueryAst:
        self.word("create")
        kind = QueryKind.CTAS
        if self.at_word("temporary", "temp"):
            self.advance()
            kind = QueryKind.CTTAS
        self.word("table")
        target = self.target()
        self.word("as")
        ast = self.select()
        ast.kind = kind
        ast.target_name = target
        return ast

    def target(self) -> str:
        if self.at_word("ipfs") and self.toks[self.i + 1].text == ".":
            self.advance()
            self.advance()
        t = self.tok
        name = self.name("table name")
        if "/" in name or "#" in name:
            raise PathError(f"bad table name {name!r}", t.pos)
        return name

    def select(self) -> QueryAst:
        self.word("select")
        items = self.items()
        self.word("from")
        source = self.source()
        predicate = []
        group_by = limit = None
        if self.at_word("where"):
            self.advance()
            predicate.append(self.comparison())
            while self.at_word("and"):
                self.advance()
                predicate.append(self.comparison())
        if self.at_word("group"):
            self.advance()
            self.word("by")
            group_by = self.name()
        if self.at_word("limit"):
            self.advance()
            t = self.tok
            if t.kind != "num" or not t.text.isdigit():
                self.error("expected a non-negative integer after LIMIT")
            self.advance()
            limit = int(t.text)
        ast = QueryAst(QueryKind.SELECT, items, source, tuple(predicate), group_by, limit)
        self.check(ast)
        return ast

    def items(self) -> list:
        if self.at_punct("*"):
            self.advance()
            return []
        out = [self.item()]
        while self.at_punct(","):
            self.advance()
            out.append(self.item())
        return out

    def item(self):
        t = self.tok
        if (t.kind == "ident" and t.word in AGG_FUNCS
                and self.toks[self.i + 1].text == "("):
            self.advance()
            self.punct("(")
            if self.at_punct("*"):
                if t.word != "count":
                    self.error(f"{t.word.upper()}(*) is not supported")
                self.advance()
                col = None
            else:
                col = self.name()
            self.punct(")")
            alias = None
            if self.at_word("as"):
                self.advance()
                alias = self.name("alias")
            elif self.tok.kind == "ident" and self.tok.word not in KEYWORDS:
                alias = self.name("alias")
            return Aggregate(t.word, col, alias)
        return self.name()

    def source(self) -> IpfsPath:
        if not self.at_word("ipfs"):
            self.error("expected ipfs.`/ipfs/<cid>#<format>` as the table")
        self.advance()
        self.punct(".")
        t = self.tok
        if t.kind != "quoted":
            self.error("expected a backquoted table path")
        self.advance()
        return parse_path(t.text[1:-1], t.pos + 1)

    def literal(self):
        t = self.tok
        if t.kind == "num":
            self.advance()
            return float(t.text) if any(c in t.text for c in ".eE") else int(t.text)
        if t.kind == "str":
            self.advance()
            return t.text[1:-1].replace("''", "'")
        if t.kind == "ident" and t.word in ("true", "false", "null"):
            self.advance()
            return {"true": True, "false": False, "null": None}[t.word]
        self.error("expected a literal")

    def comparison(self) -> Comparison:
        t = self.tok
        if t.kind in ("num", "str") or t.word in ("true", "false", "null"):
            value = self.literal()
            op = self.op()
            return Comparison(self.name(), _FLIP[op], value)
        col = self.name()
        op = self.op()
        return Comparison(col, op, self.literal())

    def op(self) -> str:
        if self.tok.kind != "op":
            self.error("expected a comparison operator")
        return self.advance().text

    def check(self, ast: QueryAst) -> None:
        plain = [i for i in ast.items if isinstance(i, str)]
        if ast.aggregates or ast.group_by:
            if ast.star:
                raise QuerySyntaxError("SELECT * cannot be combined with GROUP BY", 0)
            stray = [c for c in plain if c != ast.group_by]
            if stray:
                raise QuerySyntaxError(
                    f"column {stray[0]!r} must appear in GROUP BY or an aggregate", 0)


def parse_query(text: str | bytes) -> QueryAst:
    """Parse one statement; every failure is a QuerySyntaxError with a position."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise QuerySyntaxError("query is not valid utf-8", exc.start) from None
    return _Parser(text).statement()
