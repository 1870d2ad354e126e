"""Acceptance gate: one printed pass/fail line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
the ``acceptance`` section of the terminal summary.
"""

import csv
import json
import random
import time
from collections import Counter

import numpy as np
import pytest
from scipy import stats as sps

from minerva.bench import bench_chunk_size_sweep, sweep_curve
from minerva.cache import CacheConfig, TTLCache
from minerva.chunkstore import Chunk, ContentId
from minerva.config import MinervaConfig
from minerva.coordinator import (FlattenResult, flatten, select_providers,
                                 strategy_response_priority)
from minerva.dhtnet import PLACEMENTS, LatencyDistribution as L, Network, put_object
from minerva.latmodel import (FlattenModelParams, flatten_time_fmt, flatten_time_std,
                              provider_phase, verify_fat_speedup)
from minerva.merkle import build_standard_tree
from minerva.queryfront import Session
from minerva.reference import reference_query
from minerva.sql import parse_query
from minerva.synth import TAGS, encode_rows, fixed_width_table, make_rows, make_table

from models import compare_with_model


def constant_config(c=10.0, peers=6, **over):
    cfg = MinervaConfig()
    cfg.net.latency_kind = "constant"
    cfg.net.latency_value_ms = c
    cfg.net.peers = peers
    for k, v in over.items():
        cfg.set(k.replace("__", "."), v)
    return cfg.validate()


def as_records(names, rows):
    """Rows keyed by column name, so column order does not matter."""
    return Counter(tuple(sorted(zip(names, r), key=lambda p: p[0])) for r in rows)


# -- 1 -------------------------------------------------------------------------

def int_height(n, k):
    h, reach = 1, 1
    while reach < n:
        reach *= k
        h += 1
    return h


def test_tree_geometry(criterion):
    t0 = time.perf_counter()
    leaves = [ContentId.of(b"leaf %d" % i) for i in range(1024)]
    bad_h, bad_count, perfect = [], [], 0
    for k in (2, 3, 4, 16):
        for n in range(1, 1025):
            tree = build_standard_tree(leaves[:n], k)
            if tree.height != int_height(n, k):
                bad_h.append((n, k))
            if k ** (tree.height - 1) == n:
                perfect += 1
                if tree.total_nodes != (k ** tree.height - 1) // (k - 1):
                    bad_count.append((n, k))
    dt = time.perf_counter() - t0
    ok = not bad_h and not bad_count and dt < 5
    criterion(1, ok, f"4096 trees, height mismatches {len(bad_h)}, {perfect} perfect trees "
                     f"with count mismatches {len(bad_count)}, {dt:.2f}s (< 5s)")


# -- 2 -------------------------------------------------------------------------

def test_constant_latency_closed_forms(criterion):
    t0 = time.perf_counter()
    rng = random.Random(2)
    wrong = []
    for _ in range(50):
        k = rng.randint(2, 16)
        n = rng.randint(k + 1, 1024)
        c = rng.choice([1.0, 5.0, 10.0, 42.5])
        net = Network.create(4, L.constant(c), seed=rng.randrange(100))
        data = fixed_width_table(n, 32)
        std = put_object(net, data, chunk_size=32, fanout=k, shape="standard")
        fat = put_object(net, data, chunk_size=32, fanout=k, shape="fat")
        s = flatten(net, None, std.root).hash_elapsed
        f = flatten(net, None, fat.root).hash_elapsed
        if s != std.height * c or f != 2 * c:
            wrong.append((n, k, c, s, f))
    dt = time.perf_counter() - t0
    criterion(2, not wrong and dt < 10,
              f"50 random (N,k): standard == H*c and fat == 2c exactly; "
              f"{len(wrong)} mismatches, {dt:.2f}s (< 10s)")


# -- 3 -------------------------------------------------------------------------

def test_standard_slower_than_fat(criterion):
    t0 = time.perf_counter()
    rep = verify_fat_speedup(FlattenModelParams(256, 4, L.exponential(50)), trials=10_000, seed=0)
    std_err = abs(rep.std_analytic - rep.std_mc.mean) / rep.std_mc.mean
    fmt_err = abs(rep.fmt_analytic - rep.fmt_mc.mean) / rep.fmt_mc.mean
    dt = time.perf_counter() - t0
    ok = rep.separated and std_err < 0.05 and fmt_err < 0.05 and dt < 60
    criterion(3, ok,
              f"E[T_std] {rep.std_mc.mean:.1f} [{rep.std_mc.ci_low:.1f}, {rep.std_mc.ci_high:.1f}] > "
              f"E[T_fmt] {rep.fmt_mc.mean:.1f} [{rep.fmt_mc.ci_low:.1f}, {rep.fmt_mc.ci_high:.1f}]; "
              f"grid error {std_err:.2%} / {fmt_err:.2%} (< 5%), {dt:.1f}s (< 60s)")


# -- 4 -------------------------------------------------------------------------

SIZES = (8, 32, 128, 512, 1024)


def test_reduction_grows_with_chunk_count(criterion):
    """Exact grid ratios over binary trees, cross-checked against the simulator."""
    dist = L.exponential(50)
    hash_only, with_prov = [], []
    worst_z = 0.0
    for n in SIZES:
        p = FlattenModelParams(n, 2, dist)
        std, fmt = flatten_time_std(p).mean, flatten_time_fmt(p).mean
        prov = provider_phase(dist, n).mean
        hash_only.append(1 - fmt / std)
        with_prov.append(1 - (fmt + prov) / (std + prov))
        # the simulator's flatten must sample the modelled distribution
        net = Network.create(8, dist, seed=n)
        data = fixed_width_table(n, 64)
        for shape, model in (("standard", std), ("fat", fmt)):
            tree = put_object(net, data, chunk_size=64, fanout=2, shape=shape)
            times = np.array([flatten(net, None, tree.root, providers=False).hash_elapsed
                              for _ in range(200)])
            z = abs(times.mean() - model) / (times.std(ddof=1) / np.sqrt(len(times)))
            worst_z = max(worst_z, z)
    increasing = all(a < b for a, b in zip(hash_only, hash_only[1:]))
    increasing_p = all(a < b for a, b in zip(with_prov, with_prov[1:]))
    ok = increasing and increasing_p and worst_z < 3.29
    curve = ", ".join(f"{n}:{r:.3f}" for n, r in zip(SIZES, hash_only))
    criterion(4, ok, f"k=2 reduction {curve} strictly increasing={increasing}, "
                     f"with provider phase increasing={increasing_p}; "
                     f"simulator vs grid worst |z| {worst_z:.2f} (< 3.29)")


# -- 5 -------------------------------------------------------------------------

def test_greedy_provider_resolving(criterion):
    cfg = constant_config(gpr__enabled=True, cache__meta_enabled=False,
                          cache__peer_enabled=False)
    c, delta = cfg.net.latency_value_ms, cfg.gpr.delta_ms
    net = cfg.build_network()
    ids = list(net.peers)
    host = ids[2]
    data = encode_rows(make_rows(400, 5), "json")
    tree = put_object(net, data, chunk_size=1024, fanout=4, shape="fat", placement="single",
                      peers=[host], host=host)
    sql = (f"select grp, count(*), sum(qty), max(tag) from ipfs.`/ipfs/{tree.root.text}#json` "
           "group by grp")
    names, expected = reference_query(data, "json", parse_query(sql))
    session = Session(net, cfg)

    before = net.lookups_by_kind.get("providers", 0)
    batch, hit = session.run(sql)
    hit_lookups = net.lookups_by_kind.get("providers", 0) - before
    hit_ok = (hit.gpr_hit is True and hit_lookups == 0
              and as_records(batch.columns, batch.rows) == as_records(names, expected))

    moved = [Chunk.from_bytes(data[i:i + 1024]) for i in (0, 2048)]
    for chunk in moved:
        net.peers[host].store.remove(chunk.cid)
        net.peers[ids[4]].store.put(chunk)
        net.provider_table[chunk.cid] = [ids[4]]
    before = net.lookups_by_kind.get("providers", 0)
    batch, miss = session.run(sql)
    miss_lookups = net.lookups_by_kind.get("providers", 0) - before
    extra = miss.plan_ms - hit.plan_ms
    miss_ok = (miss.gpr_hit is False and extra == delta + c and miss_lookups == tree.leaf_count
               and dict(miss.phases)["gpr_fallback"] == delta + c
               and as_records(batch.columns, batch.rows) == as_records(names, expected))

    # same contract with random delays: the fallback costs delta plus one phase
    cfg_x = MinervaConfig()
    cfg_x.gpr.enabled = True
    net_x = cfg_x.validate().build_network()
    tree_x = put_object(net_x, data, chunk_size=1024, fanout=4, shape="fat",
                        placement="round_robin")
    plan = Session(net_x, cfg_x).plan(f"select count(*) from ipfs.`/ipfs/{tree_x.root.text}#json`")
    phase = dict(plan.phases)["gpr_fallback"]
    x_ok = plan.gpr_hit is False and phase == pytest.approx(delta + plan.flat.provider_elapsed)

    criterion(5, hit_ok and miss_ok and x_ok,
              f"hit: {hit_lookups} provider lookups, plan {hit.plan_ms:.0f} ms, answer matches; "
              f"miss: +{extra:.0f} ms == delta {delta:.0f} + one phase {c:.0f}, "
              f"{miss_lookups} lookups in one phase, answer matches; exponential fallback ok={x_ok}")


# -- 6 -------------------------------------------------------------------------

def test_cache_contract(criterion):
    t0 = time.perf_counter()
    counts = {}
    for mode in ("off", "providers_only", "peers_only", "both"):
        cfg = MinervaConfig()
        cfg.cache.meta_enabled = mode in ("providers_only", "both")
        cfg.cache.peer_enabled = mode in ("peers_only", "both")
        net = cfg.validate().build_network()
        tree = put_object(net, fixed_width_table(256, 64), chunk_size=256, fanout=4)
        session = Session(net, cfg)
        sql = f"select grp, count(*) from ipfs.`/ipfs/{tree.root.text}#json` group by grp"
        cold = session.run(sql)[1].dht_lookups
        warm = session.run(sql)[1].dht_lookups
        counts[mode] = (cold, warm)
    cold = counts["off"][0]
    partial_ok = all(0 < counts[m][1] < cold for m in ("providers_only", "peers_only"))
    mismatches = compare_with_model(TTLCache, CacheConfig, 10_000)
    dt = time.perf_counter() - t0
    ok = counts["both"][1] == 0 and partial_ok and mismatches == 0 and dt < 30
    detail = ", ".join(f"{m} {c}->{w}" for m, (c, w) in counts.items())
    criterion(6, ok, f"lookups cold->repeat: {detail}; LRU/TTL model mismatches on 10^4 "
                     f"sequences: {mismatches}, {dt:.1f}s (< 30s)")


# -- 7 -------------------------------------------------------------------------

def test_scheduler_invariants(criterion):
    rng = random.Random(7)
    peers = [f"P{i}" for i in range(8)]
    membership = balance = True
    for trial in range(2000):
        n = rng.randint(1, 60)
        leaves = [ContentId.of(b"%d/%d" % (trial, i)) for i in range(n)]
        provs = {leaf: tuple(rng.sample(peers, rng.randint(1, 5))) for leaf in leaves}
        flat = FlattenResult(leaves[0], leaves, provs, 0, 0, 0.0)
        m = rng.randint(1, 5)
        for strategy in ("random", "load_balance"):
            a = select_providers(flat, strategy, m, np.random.default_rng(trial))
            membership &= all(a.chosen[leaf] in provs[leaf][:m] for leaf in leaves)
        everyone = tuple(rng.sample(peers, m))
        flat_all = FlattenResult(leaves[0], leaves, {leaf: everyone for leaf in leaves}, 0, 0, 0.0)
        w = select_providers(flat_all, "load_balance", m).workload
        loads = [w.get(p, 0) for p in everyone]
        balance &= max(loads) - min(loads) <= 1

    net = Network.create(1, L.constant(1))
    for name, ms in (("A", 5), ("B", 50), ("C", 20)):
        net.add_peer(name, probe_latency=L.constant(ms))
    local = all(strategy_response_priority(list(perm), net, foreman=f) == f
                for f in "ABC" for perm in (("A", "B", "C"), ("C", "B", "A")))
    fastest = strategy_response_priority(["B", "C", "A"], net, foreman="X") == "A"

    leaves = [ContentId.of(b"draw %d" % i) for i in range(10_000)]
    options = ("PA", "PB", "PC", "PD")
    flat = FlattenResult(leaves[0], leaves, {leaf: options for leaf in leaves}, 0, 0, 0.0)
    w = select_providers(flat, "random", 4, np.random.default_rng(99)).workload
    observed = [w.get(p, 0) for p in options]
    p_value = sps.chisquare(observed).pvalue
    ok = membership and balance and local and fastest and p_value > 0.01
    criterion(7, ok, f"membership={membership}, load balance spread<=1={balance}, "
                     f"response priority local={local} fastest={fastest}, "
                     f"random chi-square p={p_value:.3f} (> 0.01) over {observed}")


# -- 8 -------------------------------------------------------------------------

STRATEGIES = ("random", "load_balance", "response_priority")
NUMERIC = ("id", "grp", "qty")
ANY = ("id", "grp", "qty", "price", "tag", "ok", "note")


def random_query(rng, source):
    preds = []
    for _ in range(rng.choice([0, 0, 1, 1, 2])):
        col = rng.choice(["qty", "price", "tag", "ok", "grp", "id"])
        if col == "tag":
            preds.append(f"tag {rng.choice(['=', '!='])} '{rng.choice(TAGS)}'")
        elif col == "ok":
            preds.append(f"ok = {rng.choice(['true', 'false'])}")
        else:
            op = rng.choice(["<", "<=", ">", ">=", "=", "!="])
            val = {"qty": rng.randint(-1000, 1000), "price": round(rng.uniform(0, 500), 1),
                   "grp": rng.randint(0, 12), "id": rng.randint(0, 20_000)}[col]
            preds.append(f"{col} {op} {val}" if rng.random() < 0.8 else f"{val} {op} {col}")
    where = f" where {' and '.join(preds)}" if preds else ""
    shape = rng.random()
    if shape < 0.1:
        return f"select * from {source}{where}"
    if shape < 0.4:
        cols = rng.sample(ANY, rng.randint(1, 3))
        return f"select {', '.join(cols)} from {source}{where}"
    aggs = []
    for _ in range(rng.randint(1, 3)):
        f = rng.choice(["count", "count*", "sum", "min", "max"])
        if f == "count*":
            aggs.append("count(*)")
        elif f == "sum":
            aggs.append(f"sum({rng.choice(NUMERIC)})")
        else:
            aggs.append(f"{f}({rng.choice(ANY)})")
    key = rng.choice([None, "grp", "tag", "ok"])
    if key is None:
        return f"select {', '.join(aggs)} from {source}{where}"
    return f"select {key}, {', '.join(aggs)} from {source}{where} group by {key}"


@pytest.mark.slow
def test_distributed_matches_reference(criterion):
    t0 = time.perf_counter()
    tables = {"csv": make_table(1_200_000, "csv", seed=8),
              "json": make_table(1_500_000, "json", seed=9)}
    rng = random.Random(8)
    total, failures, combos = 0, [], set()
    for strategy in STRATEGIES:
        for placement in PLACEMENTS:
            cfg = MinervaConfig()
            cfg.net.peers = 6
            cfg.net.executor_peers = 5  # one storage-only peer ships raw chunks
            cfg.net.seed = total
            cfg.scheduler.strategy = strategy
            net = cfg.validate().build_network()
            session = Session(net, cfg)
            for fmt, data in tables.items():
                tree = put_object(net, data, chunk_size=rng.choice([40_000, 65_536, 100_003]),
                                  fanout=rng.choice([2, 4, 8]), shape=rng.choice(["standard", "fat"]),
                                  placement=placement, replication=2,
                                  rng=np.random.default_rng(total))
                source = f"ipfs.`/ipfs/{tree.root.text}#{fmt}`"
                for _ in range(9):
                    sql = random_query(rng, source)
                    batch, _ = session.run(sql)
                    names, rows = reference_query(data, fmt, parse_query(sql))
                    if as_records(batch.columns, batch.rows) != as_records(names, rows):
                        failures.append(sql)
                    total += 1
            combos.add((strategy, placement))
    dt = time.perf_counter() - t0
    ok = total >= 200 and not failures and len(combos) == 12 and dt < 300
    criterion(8, ok, f"{total} queries over {len(combos)} strategy x placement combos on "
                     f"{len(tables['csv']) / 1e6:.1f} MB csv and {len(tables['json']) / 1e6:.1f} MB "
                     f"ndjson: {len(failures)} mismatches, {dt:.0f}s (< 300s)"
                     + (f"; first: {failures[0]}" if failures else ""))


# -- 9 -------------------------------------------------------------------------

def whole_record(line, fmt, width):
    if fmt == "json":
        return isinstance(json.loads(line), dict)
    return len(next(csv.reader([line], strict=True))) == width


def write_case(cfg, fmt):
    net = cfg.build_network()
    data = encode_rows(make_rows(3000, 11), fmt)
    tree = put_object(net, data, chunk_size=8192, fanout=4, placement="round_robin")
    return net, data, tree


def test_write_path(criterion):
    results = []
    for label, cfg in (("constant", constant_config(cache__meta_enabled=False,
                                                     cache__peer_enabled=False)),
                       ("exponential", MinervaConfig().validate())):
        cfg.chunk.size = 4096
        for fmt in ("csv", "json"):
            inner = "select id, qty, tag, note from {t} where ok = true"
            # identical twins: same seed, same puts, so the reads draw the same delays
            net_r, data, tree = write_case(cfg, fmt)
            net_w, _, _ = write_case(cfg, fmt)
            src = f"ipfs.`/ipfs/{tree.root.text}#{fmt}`"
            read, read_stats = Session(net_r, cfg).run(inner.format(t=src))
            writer = Session(net_w, cfg)
            _, w_stats = writer.run(f"create table ipfs.out as {inner.format(t=src)}")

            leaves = flatten(net_w, None, w_stats.new_cid, providers=False).leaves
            middles = -(-len(leaves) // cfg.merkle.fanout) if len(leaves) > cfg.merkle.fanout else 0
            overhead = (cfg.write.hash_ms_per_block * (len(leaves) + middles + 1)
                        + cfg.write.publish_ms)
            exact = (w_stats.total_ms - read_stats.total_ms == overhead
                     and w_stats.write_ms == overhead)

            store = net_w.peer(writer.foreman).store
            blobs = [store.get(c) for c in leaves]
            aligned = all(b.endswith(b"\n") for b in blobs) and all(
                whole_record(line, fmt, width=len(read.columns))
                for b in blobs for line in b.decode().splitlines()[(fmt == "csv" and b is blobs[0]):])

            back, _ = writer.run("select * from ipfs.`out`")
            roundtrip = as_records(back.columns, back.rows) == as_records(read.columns, read.rows)
            results.append((f"{label}/{fmt}", exact and aligned and roundtrip, len(leaves),
                            w_stats.total_ms - read_stats.total_ms, overhead))
    ok = all(r[1] for r in results)
    detail = "; ".join(f"{name}: {n} chunks, +{d:.1f} ms vs overhead {o:.1f}"
                       for name, _, n, d, o in results)
    criterion(9, ok, f"roundtrip, record-aligned chunks, exact overhead: {detail}")


# -- 10 ------------------------------------------------------------------------

@pytest.mark.slow
def test_chunk_size_sweep_shape(criterion):
    t0 = time.perf_counter()
    rows = bench_chunk_size_sweep(MinervaConfig(), runs=5)
    curve = sweep_curve(rows)
    means = [m for _, m in curve]
    best = int(np.argmin(means))
    ok = 0 < best < len(means) - 1 and means[0] > means[best] < means[-1]
    pts = ", ".join(f"{s // 1024}K:{m:.0f}" for s, m in curve)
    criterion(10, ok, f"mean total ms by chunk size {pts}; minimum at "
                      f"{curve[best][0] // 1024} KiB (interior), {time.perf_counter() - t0:.0f}s")
