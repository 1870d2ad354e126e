"""Single-node evaluation of a parsed query over the raw object bytes.

Deliberately shares nothing with the distributed path beyond the parser:
the whole object is read in one piece, split into lines and evaluated with
plain Python. Used as the correctness oracle for distributed runs.
"""

from __future__ import annotations

import csv
import json
import operator
from collections import Counter

from .sql import QueryAst

_CMP = {"=": operator.eq, "!=": operator.ne, "<>": operator.ne, "<": operator.lt,
        "<=": operator.le, ">": operator.gt, ">=": operator.ge}


def _typed(text: str):
    if text == "":
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _rank(v) -> int:
    if v is None:
        return 0
    if isinstance(v, bool):
        return 1
    if isinstance(v, int):
        return 2
    if isinstance(v, float):
        return 3
    return 4


def _text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _unify(rows: list[list], ncol: int) -> list[tuple]:
    """Per-column widening: bool/int/float mix to float, anything with text to text."""
    for i in range(ncol):
        ranks = {_rank(r[i]) for r in rows} - {0}
        if not ranks or len(ranks) == 1:
            continue
        if 4 in ranks or 1 in ranks:
            for r in rows:
                if r[i] is not None:
                    r[i] = _text(r[i])
        else:
            for r in rows:
                if r[i] is not None:
                    r[i] = float(r[i])
    return [tuple(r) for r in rows]


def load_rows(data: bytes, fmt: str) -> tuple[list[str], list[dict]]:
    lines = [ln.rstrip("\r") for ln in data.decode("utf-8").split("\n")]
    lines = [ln for ln in lines if ln.strip()]
    if fmt == "csv":
        if not lines:
            return [], []
        parsed = list(csv.reader(lines))
        header, body = parsed[0], parsed[1:]
        return header, [{h: _typed(f) for h, f in zip(header, row)} for row in body]
    records = [json.loads(ln) for ln in lines]
    cols: dict[str, None] = {}
    for r in records:
        cols.update(dict.fromkeys(r))
    return list(cols), records


def _matches(rec: dict, ast: QueryAst) -> bool:
    for c in ast.predicate:
        v = rec.get(c.column)
        if v is None or c.value is None:
            return False
        if isinstance(v, bool) != isinstance(c.value, bool):
            if c.op not in ("!=", "<>"):
                return False
            continue
        try:
            ok = _CMP[c.op](v, c.value)
        except TypeError:
            ok = c.op in ("!=", "<>")
        if not ok:
            return False
    return True


def _aggregate(func: str, values: list):
    if func == "count":
        return len(values)
    present = [v for v in values if v is not None]
    if not present:
        return None
    if func == "sum":
        return sum(present)
    return min(present) if func == "min" else max(present)


def reference_query(data: bytes, fmt: str, ast: QueryAst) -> tuple[list[str], list[tuple]]:
    """Evaluate ``ast`` over a whole object. Returns (column names, rows)."""
    columns, records = load_rows(data, fmt)
    kept = [r for r in records if _matches(r, ast)]
    if ast.aggregates or ast.group_by:
        groups: dict = {}
        if ast.group_by is None:
            groups[None] = kept
        else:
            for r in kept:
                groups.setdefault(r.get(ast.group_by), []).append(r)
        rows = []
        for key, members in groups.items():
            row = []
            for item in ast.items:
                if isinstance(item, str):
                    row.append(key)
                elif item.column is None:
                    row.append(len(members))
                else:
                    vals = [m.get(item.column) for m in members]
                    if item.func == "count":
                        vals = [v for v in vals if v is not None]
                    row.append(_aggregate(item.func, vals))
            rows.append(row)
        names = ast.output_names
    else:
        names = columns if ast.star else list(ast.projection)
        rows = [[r.get(c) for c in names] for r in kept]
    out = _unify(rows, len(names))
    if ast.limit is not None:
        out = out[:ast.limit]
    return names, out


def same_multiset(a_rows, b_rows) -> bool:
    return Counter(map(tuple, a_rows)) == Counter(map(tuple, b_rows))
