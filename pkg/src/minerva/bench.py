"""Experiment harness: end-to-end query runs emitting one stats row each.

Every experiment varies one knob and leaves the rest of the supplied config
alone. The knob's value is written into the experiment column, e.g.
``chunk_size_sweep[s=65536]`` or ``dht_reduction[fat]``.
"""

from __future__ import annotations

import copy
import csv
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cache import MinervaCache
from .config import MinervaConfig
from .dhtnet import put_object
from .queryfront import Session
from .synth import fixed_width_table, make_table

STATS_COLUMNS = ("experiment", "n_chunks", "strategy", "cache_mode", "plan_ms", "exec_ms",
                 "total_ms", "dht_lookups", "bytes_shipped")
EXPERIMENTS = ("dht_reduction", "cache_ablation", "chunk_size_sweep", "parallel_width")

DHT_SIZES = (8, 32, 128, 512, 1024)
SWEEP_SIZES = tuple(64 * 1024 * 2 ** i for i in range(8))  # 64 KiB .. 8 MiB
WORKER_COUNTS = (1, 2, 4, 8, 16)
AGG_QUERY = "select grp, count(*), sum(qty), max(price) from ipfs.`/ipfs/{cid}#{fmt}` group by grp"


@dataclass
class BenchRow:
    experiment: str
    n_chunks: int
    strategy: str
    cache_mode: str
    plan_ms: float
    exec_ms: float
    total_ms: float
    dht_lookups: int
    bytes_shipped: int
    seed: int = 0

    def csv_row(self) -> dict:
        return {c: getattr(self, c) for c in STATS_COLUMNS}


def _cache_mode(cfg: MinervaConfig) -> str:
    meta, peer = cfg.cache.meta_enabled, cfg.cache.peer_enabled
    return {(False, False): "off", (True, False): "providers_only",
            (False, True): "peers_only", (True, True): "both"}[(meta, peer)]


def _row(name: str, cfg: MinervaConfig, stats, seed: int) -> BenchRow:
    return BenchRow(name, stats.n_chunks, cfg.scheduler.strategy, _cache_mode(cfg),
                    stats.plan_ms, stats.exec_ms, stats.total_ms, stats.dht_lookups,
                    stats.bytes_shipped, seed)


def _set_cache(cfg: MinervaConfig, mode: str) -> None:
    cfg.cache.meta_enabled = mode in ("providers_only", "both")
    cfg.cache.peer_enabled = mode in ("peers_only", "both")


def bench_dht_reduction(cfg: MinervaConfig, runs: int = 20, sizes=DHT_SIZES, fanout: int = 2,
                        row_bytes: int = 64) -> list[BenchRow]:
    """Standard vs fat index at growing chunk counts, caches off."""
    out = []
    cfg = copy.deepcopy(cfg)
    _set_cache(cfg, "off")
    for n in sizes:
        net = cfg.build_network()
        data = fixed_width_table(n, row_bytes, cfg.net.seed)
        for shape in ("standard", "fat"):
            tree = put_object(net, data, chunk_size=row_bytes, fanout=fanout, shape=shape,
                              placement=cfg.net.placement, replication=cfg.net.replication)
            session = Session(net, cfg)
            sql = f"select count(*) from ipfs.`/ipfs/{tree.root.text}#json`"
            for r in range(runs):
                _, stats = session.run(sql)
                out.append(_row(f"dht_reduction[{shape}]", cfg, stats, r))
    return out


def bench_cache_ablation(cfg: MinervaConfig, runs: int = 3, n_chunks: int = 64,
                         row_bytes: int = 64) -> list[BenchRow]:
    """Repeat one query under each cache mode; run 1 is cold."""
    out = []
    cfg = copy.deepcopy(cfg)
    data = fixed_width_table(n_chunks * 4, row_bytes, cfg.net.seed)
    for mode in MinervaCache.MODES:
        _set_cache(cfg, mode)
        net = cfg.build_network()
        tree = put_object(net, data, chunk_size=4 * row_bytes, fanout=cfg.merkle.fanout,
                          shape=cfg.merkle.shape, placement=cfg.net.placement,
                          replication=cfg.net.replication)
        session = Session(net, cfg)
        sql = f"select grp, count(*) from ipfs.`/ipfs/{tree.root.text}#json` group by grp"
        for r in range(1, runs + 1):
            _, stats = session.run(sql)
            out.append(_row(f"cache_ablation[{mode},run={r}]", cfg, stats, r))
    return out


def bench_chunk_size_sweep(cfg: MinervaConfig, runs: int = 5, sizes=SWEEP_SIZES,
                           table_bytes: int = 10 * 1000 * 1000) -> list[BenchRow]:
    """One aggregate query over a 10 MB table at each chunk size, caches off."""
    out = []
    cfg = copy.deepcopy(cfg)
    _set_cache(cfg, "off")
    data = make_table(table_bytes, "csv", cfg.net.seed)
    for r in range(runs):
        for s in sizes:
            cfg.chunk.size = s
            cfg.net.seed = r
            net = cfg.build_network()
            tree = put_object(net, data, chunk_size=s, fanout=cfg.merkle.fanout,
                              shape=cfg.merkle.shape, placement=cfg.net.placement,
                              replication=cfg.net.replication)
            _, stats = Session(net, cfg).run(AGG_QUERY.format(cid=tree.root.text, fmt="csv"))
            out.append(_row(f"chunk_size_sweep[s={s}]", cfg, stats, r))
    return out


def bench_parallel_width(cfg: MinervaConfig, runs: int = 5, workers=WORKER_COUNTS,
                         table_bytes: int = 4 * 1000 * 1000, chunk_size: int = 128 * 1024
                         ) -> list[BenchRow]:
    """Same table spread round-robin over a growing number of executor peers."""
    out = []
    cfg = copy.deepcopy(cfg)
    _set_cache(cfg, "off")
    data = make_table(table_bytes, "csv", cfg.net.seed)
    for r in range(runs):
        for w in workers:
            cfg.net.peers = w
            cfg.net.seed = r
            cfg.net.executor_peers = None
            cfg.net.foreman = 0
            net = cfg.build_network()
            tree = put_object(net, data, chunk_size=chunk_size, fanout=cfg.merkle.fanout,
                              shape=cfg.merkle.shape, placement="round_robin")
            _, stats = Session(net, cfg).run(AGG_QUERY.format(cid=tree.root.text, fmt="csv"))
            out.append(_row(f"parallel_width[workers={w}]", cfg, stats, r))
    return out


_RUNNERS = {
    "dht_reduction": bench_dht_reduction,
    "cache_ablation": bench_cache_ablation,
    "chunk_size_sweep": bench_chunk_size_sweep,
    "parallel_width": bench_parallel_width,
}


def run_bench(experiment: str, config: MinervaConfig | None = None, **kwargs) -> list[BenchRow]:
    if experiment not in _RUNNERS:
        raise ValueError(f"unknown experiment {experiment!r}; choose from {EXPERIMENTS}")
    cfg = (config or MinervaConfig()).validate()
    return _RUNNERS[experiment](cfg, **kwargs)


def write_stats_csv(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r.csv_row())


def mean_by(rows, key: str = "total_ms") -> dict[str, float]:
    """Mean of one column per experiment label."""
    acc = defaultdict(list)
    for r in rows:
        acc[r.experiment].append(getattr(r, key))
    return {k: float(np.mean(v)) for k, v in acc.items()}


def dht_reduction_curve(rows) -> dict[int, float]:
    """Relative plan-time saving of the fat index over the standard one, per chunk count."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r.n_chunks, r.experiment.endswith("[fat]"))].append(r.plan_ms)
    out = {}
    for n in sorted({n for n, _ in acc}):
        std, fat = np.mean(acc[(n, False)]), np.mean(acc[(n, True)])
        out[n] = float(1.0 - fat / std)
    return out


def sweep_curve(rows) -> list[tuple[int, float]]:
    """(chunk size, mean total ms) pairs of a chunk-size sweep, ascending."""
    means = mean_by(rows)
    pts = []
    for label, m in means.items():
        if label.startswith("chunk_size_sweep[s="):
            pts.append((int(label[len("chunk_size_sweep[s="):-1]), m))
    return sorted(pts)
