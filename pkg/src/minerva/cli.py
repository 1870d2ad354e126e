"""Command line front end.

    minerva net --config sim.conf          build a simulated network
    minerva put table.csv --format csv     chunk, index and publish a file
    minerva query "select ..."             run one statement
    minerva bench chunk_size_sweep --out stats.csv

Network, caches and catalog live in a state directory (``--state``,
default ``.minerva``) between invocations.
"""

from __future__ import annotations

import argparse
import pickle
import sys
from pathlib import Path

from .bench import EXPERIMENTS, mean_by, run_bench, write_stats_csv
from .config import MinervaConfig, dump_config, load_config
from .dhtnet import PLACEMENTS, put_object
from .errors import MinervaError
from .queryfront import Catalog, Session, format_table

STATE_FILE = "state.pkl"


def _state_path(args) -> Path:
    return Path(args.state) / STATE_FILE


def load_state(args) -> dict:
    path = _state_path(args)
    if path.exists():
        with open(path, "rb") as fh:
            return pickle.load(fh)
    cfg = MinervaConfig().validate()
    return {"config": cfg, "net": cfg.build_network(), "cache": None}


def save_state(args, state: dict) -> None:
    path = _state_path(args)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(state, fh)
    tmp.replace(path)


def cmd_net(args) -> int:
    cfg = load_config(args.config) if args.config else MinervaConfig().validate()
    net = cfg.build_network()
    save_state(args, {"config": cfg, "net": net, "cache": None})
    print(f"network with {net.size} peers, latency {cfg.net.latency_kind}, seed {cfg.net.seed}")
    for i, p in enumerate(net.peers.values()):
        role = "executor" if p.has_executor else "storage only"
        mark = "  (foreman)" if i == cfg.net.foreman else ""
        print(f"  {p.peer_id}  {p.address:<16} {role}{mark}")
    if args.verbose:
        print(dump_config(cfg), end="")
    return 0


def cmd_put(args) -> int:
    state = load_state(args)
    cfg, net = state["config"], state["net"]
    path = Path(args.file)
    fmt = args.format or ("json" if path.suffix.lower() in (".json", ".ndjson") else "csv")
    data = path.read_bytes()
    shape = "fat" if args.fat else "standard" if args.standard else cfg.merkle.shape
    tree = put_object(net, data, chunk_size=args.chunk_size or cfg.chunk.size,
                      fanout=args.k or cfg.merkle.fanout, shape=shape,
                      placement=args.placement or cfg.net.placement,
                      replication=args.replication or cfg.net.replication)
    save_state(args, state)
    print(tree.root.text)
    print(f"{tree.leaf_count} chunks, {shape} tree of height {tree.height}; "
          f"query as ipfs.`/ipfs/{tree.root.text}#{fmt}`", file=sys.stderr)
    return 0


def cmd_query(args) -> int:
    state = load_state(args)
    cfg, net = state["config"], state["net"]
    catalog_path = cfg.catalog.path or str(Path(args.state) / "catalog.json")
    Path(catalog_path).parent.mkdir(parents=True, exist_ok=True)
    session = Session(net, cfg, cache=state.get("cache"), catalog=Catalog(catalog_path))
    batch, stats = session.run(args.sql)
    state["cache"] = session.cache
    save_state(args, state)
    if stats.new_cid is not None:
        print(stats.new_cid.text)
    else:
        print(format_table(batch, args.max_rows))
    err = sys.stderr
    print(f"rows={stats.rows_returned} plan_ms={stats.plan_ms:.3f} exec_ms={stats.exec_ms:.3f} "
          f"write_ms={stats.write_ms:.3f} total_ms={stats.total_ms:.3f} "
          f"dht_lookups={stats.dht_lookups} bytes_shipped={stats.bytes_shipped}", file=err)
    if args.verbose:
        for name, ms in stats.phases:
            print(f"  {name:<16} {ms:10.3f} ms", file=err)
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config) if args.config else MinervaConfig()
    kwargs = {"runs": args.runs} if args.runs else {}
    rows = run_bench(args.experiment, cfg, **kwargs)
    write_stats_csv(rows, args.out)
    for label, m in mean_by(rows).items():
        print(f"{label:<40} mean total_ms {m:10.2f}")
    print(f"{len(rows)} rows written to {args.out}", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="minerva", description=__doc__.split("\n")[0])
    ap.add_argument("--state", default=".minerva", help="state directory (default .minerva)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("net", help="create a simulated network from a config file")
    p.add_argument("--config", help="key = value config file")
    p.set_defaults(func=cmd_net)

    p = sub.add_parser("put", help="publish a CSV or NDJSON file, print its top cid")
    p.add_argument("file")
    p.add_argument("--format", choices=("csv", "json"))
    shape = p.add_mutually_exclusive_group()
    shape.add_argument("--fat", action="store_true", help="index with a fat (3 level) tree")
    shape.add_argument("--standard", action="store_true", help="index with a k-ary tree")
    p.add_argument("--k", type=int, help="tree fanout")
    p.add_argument("--chunk-size", type=int, help="chunk size in bytes")
    p.add_argument("--placement", choices=PLACEMENTS)
    p.add_argument("--replication", type=int)
    p.set_defaults(func=cmd_put)

    p = sub.add_parser("query", help="run one SQL statement")
    p.add_argument("sql")
    p.add_argument("--max-rows", type=int, default=50)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("bench", help="run an experiment and write the stats csv")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--out", default="stats.csv")
    p.add_argument("--config")
    p.add_argument("--runs", type=int)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MinervaError as exc:
        stage = f"[{exc.stage}] " if exc.stage else ""
        print(f"error: {stage}{exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
