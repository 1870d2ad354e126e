"""Synthetic tables for benchmarks and correctness runs."""

from __future__ import annotations

import csv
import io
import json

import numpy as np

COLUMNS = ("id", "grp", "qty", "price", "tag", "ok", "note")
WORDS = ("lorem", "ipsum", "dolor", "sit", "amet", "consectetur", "adipiscing", "elit",
         "sed", "do", "eiusmod", "tempor", "incididunt", "labore")
TAGS = ("alpha", "beta", "gamma", "delta", "eps", "x,y", 'say "hi"')


def make_rows(n_rows: int, seed: int = 0, null_rate: float = 0.05) -> list[tuple]:
    """Rows of (id, grp, qty, price, tag, ok, note) with a few nulls sprinkled in."""
    rng = np.random.default_rng(seed)
    grp = rng.integers(0, 12, n_rows)
    qty = rng.integers(-1000, 1000, n_rows)
    price = np.round(rng.uniform(0, 500, n_rows), 2)
    tag = rng.integers(0, len(TAGS), n_rows)
    ok = rng.random(n_rows) < 0.5
    nulls = rng.random((n_rows, 4)) < null_rate
    words = rng.integers(0, len(WORDS), (n_rows, 8))
    rows = []
    for i in range(n_rows):
        rows.append((
            i,
            int(grp[i]),
            None if nulls[i, 0] else int(qty[i]),
            None if nulls[i, 1] else float(price[i]),
            None if nulls[i, 2] else TAGS[tag[i]],
            None if nulls[i, 3] else bool(ok[i]),
            " ".join(WORDS[w] for w in words[i]),
        ))
    return rows


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def encode_rows(rows, fmt: str, columns=COLUMNS) -> bytes:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_csv_cell(v) for v in r])
        return buf.getvalue().encode()
    if fmt == "json":
        out = []
        for r in rows:
            rec = {c: v for c, v in zip(columns, r) if v is not None}
            out.append(json.dumps(rec, separators=(",", ":")))
        return ("\n".join(out) + "\n").encode()
    raise ValueError(f"unknown format {fmt!r}")


def make_table(target_bytes: int, fmt: str = "csv", seed: int = 0) -> bytes:
    """A table of roughly ``target_bytes`` bytes."""
    probe = encode_rows(make_rows(200, seed), fmt)
    per_row = len(probe) / 200
    n = max(1, int(target_bytes / per_row))
    return encode_rows(make_rows(n, seed), fmt)


def fixed_width_table(n_rows: int, row_bytes: int = 64, seed: int = 0) -> bytes:
    """NDJSON rows padded with whitespace to exactly ``row_bytes`` bytes each."""
    rng = np.random.default_rng(seed)
    vals = rng.integers(0, 1000, n_rows)
    lines = []
    for i in range(n_rows):
        body = f'{{"id":{i},"grp":{i % 10},"v":{int(vals[i])}'
        if len(body) + 2 > row_bytes:
            raise ValueError(f"row_bytes {row_bytes} too small")
        lines.append(body.ljust(row_bytes - 2) + "}\n")
    return "".join(lines).encode()
