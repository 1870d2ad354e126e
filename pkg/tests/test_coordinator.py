import random
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from minerva.cache import MetaEntry, MinervaCache
from minerva.chunkstore import Chunk, ContentId
from minerva.coordinator import (Assignment, FlattenResult, GprConfig, Strategy, candidates,
                                 flatten, gpr_resolve, resolve_providers, select_providers,
                                 strategy_load_balance, strategy_random,
                                 strategy_response_priority)
from minerva.dhtnet import LatencyDistribution, Network, put_object
from minerva.errors import FlattenFailure, QueryFailure, SchedulingFailure
from minerva.merkle import tree_height


def const_net(n_peers=4, c=10.0, seed=0):
    return Network.create(n_peers, LatencyDistribution.constant(c), seed=seed)


def publish(net, n, k, shape, placement="round_robin", chunk=8, **kw):
    data = b"".join(b"%07d\n" % i for i in range(n))[: n * chunk]
    tree = put_object(net, data, chunk_size=chunk, fanout=k, shape=shape, placement=placement, **kw)
    assert tree.leaf_count == n
    return tree


def flat_of(leaves, providers):
    return FlattenResult(leaves[0], leaves, providers, 0, 0, 0.0)


@settings(max_examples=200)
@given(st.integers(1, 120), st.integers(2, 6), st.sampled_from(["standard", "fat"]))
def test_flatten_recovers_leaf_sequence(n, k, shape):
    net = const_net()
    tree = publish(net, n, k, shape)
    flat = flatten(net, None, tree.root)
    assert flat.leaves == tree.leaves()
    assert all(flat.providers[leaf] for leaf in flat.leaves)


def test_standard_sixteen_by_two():
    net = const_net(c=10)
    tree = publish(net, 16, 2, "standard")
    flat = flatten(net, None, tree.root)
    assert tree.height == 5
    assert flat.hash_elapsed == 50 and flat.elapsed == 60 and flat.rounds == 6


def test_constant_latency_closed_forms_random_sizes():
    rng = random.Random(3)
    for _ in range(50):
        n, k = rng.randint(1, 400), rng.randint(2, 9)
        c = rng.choice([1.0, 7.5, 10.0, 33.0])
        net = const_net(c=c)
        std = flatten(net, None, publish(net, n, k, "standard").root)
        h = tree_height(n, k)
        assert std.hash_elapsed == h * c and std.rounds == h + 1
        assert std.provider_elapsed == c
        fat = flatten(net, None, publish(net, n, k, "fat").root)
        if n > k:
            assert fat.hash_elapsed == 2 * c and fat.rounds == 3
        else:
            assert fat.hash_elapsed == c and fat.rounds == 2


def test_fat_tree_skips_leaf_lookups():
    net = const_net()
    tree = publish(net, 40, 4, "fat")
    flat = flatten(net, None, tree.root)
    assert flat.lookups == 1 + 10 + 40  # root, middle layer, providers


def test_warm_cache_costs_nothing():
    net = const_net()
    tree = publish(net, 30, 3, "standard")
    cache = MinervaCache()
    cold = flatten(net, cache, tree.root)
    before = net.lookups
    warm = flatten(net, cache, tree.root)
    assert net.lookups == before
    assert warm.lookups == 0 and warm.elapsed == 0
    assert warm.leaves == cold.leaves and warm.providers == cold.providers


def test_cached_subtree_is_reused():
    net = const_net()
    tree = publish(net, 16, 2, "standard")
    cache = MinervaCache()
    flatten(net, cache, tree.root)
    cache.invalidate_meta(tree.root)
    flat = flatten(net, cache, tree.root)
    assert flat.lookups == 1  # only the root; both halves come from cache
    assert flat.leaves == tree.leaves()


def test_missing_node_is_named():
    net = const_net()
    tree = publish(net, 8, 2, "standard")
    victim = tree.nodes[tree.root].children[1]
    del net.node_table[victim]
    with pytest.raises(FlattenFailure) as info:
        flatten(net, None, tree.root)
    assert info.value.cid == victim


def test_parallel_provider_phase_is_max_of_samples():
    net = Network.create(3, LatencyDistribution.exponential(40), seed=9)
    tree = publish(net, 20, 4, "fat")
    leaves = tree.leaves()
    expected = np.random.default_rng(9).exponential(40, 20).max()
    _, elapsed, n = resolve_providers(net, leaves)
    assert n == 20 and elapsed == pytest.approx(expected)


def test_pool_of_one_serializes_lookups():
    net = const_net(c=5)
    tree = publish(net, 12, 4, "fat")
    flat = flatten(net, None, tree.root, pool_size=1)
    assert flat.hash_elapsed == 5 * (1 + 3)
    assert flat.provider_elapsed == 5 * 12


# -- selection -------------------------------------------------------------

PEERS = ["PA", "PB", "PC", "PD"]


@given(st.lists(st.lists(st.sampled_from(PEERS), min_size=1, max_size=4, unique=True),
                min_size=1, max_size=40),
       st.sampled_from(["random", "load_balance"]), st.integers(1, 4), st.integers(0, 99))
def test_choice_is_always_a_provider(provs, strategy, m, seed):
    leaves = [ContentId.of(b"%d" % i) for i in range(len(provs))]
    flat = flat_of(leaves, dict(zip(leaves, map(tuple, provs))))
    a = select_providers(flat, strategy, m, np.random.default_rng(seed))
    for leaf, p in zip(leaves, provs):
        assert a.chosen[leaf] in p[:m]
    assert sum(a.workload.values()) == len(leaves)


@given(st.integers(1, 200), st.integers(1, 6))
def test_load_balance_spread_at_most_one(n, m):
    peers = PEERS[: min(m, 4)]
    leaves = [ContentId.of(b"%d" % i) for i in range(n)]
    flat = flat_of(leaves, {leaf: tuple(peers) for leaf in leaves})
    w = select_providers(flat, "load_balance", 4).workload
    counts = [w.get(p, 0) for p in peers]
    assert max(counts) - min(counts) <= 1


def test_load_balance_examples():
    w = {"A": 2, "B": 0, "C": 1}
    assert strategy_load_balance(["A", "B", "C"], w) == "B" and w["B"] == 1
    assert strategy_load_balance(["B", "A"], {"A": 1, "B": 1}) == "A"
    w = {}
    for _ in range(9):
        strategy_load_balance(["A", "B", "C"], w)
    assert w == {"A": 3, "B": 3, "C": 3}
    leaves = [ContentId.of(b"%d" % i) for i in range(6)]
    flat = flat_of(leaves, {leaf: ("A", "B", "C") for leaf in leaves})
    assert select_providers(flat, "load_balance").workload == {"A": 2, "B": 2, "C": 2}


def test_random_examples():
    assert strategy_random(["only"], np.random.default_rng(0)) == "only"
    picks = [strategy_random(PEERS, np.random.default_rng(4)) for _ in range(3)]
    assert len(set(picks)) == 1
    leaves = [ContentId.of(b"%d" % i) for i in range(1000)]
    flat = flat_of(leaves, {leaf: ("PA", "PB", "PC") for leaf in leaves})
    w = select_providers(flat, "random", 3, np.random.default_rng(1)).workload
    assert all(233 <= w[p] <= 433 for p in ("PA", "PB", "PC"))


def test_random_respects_max_providers():
    leaves = [ContentId.of(b"%d" % i) for i in range(300)]
    flat = flat_of(leaves, {leaf: tuple(PEERS) for leaf in leaves})
    w = select_providers(flat, "random", 2, np.random.default_rng(0)).workload
    assert set(w) == {"PA", "PB"}


def probe_net(latencies):
    net = Network.create(1, LatencyDistribution.constant(1))
    for name, ms in latencies.items():
        net.add_peer(name, probe_latency=LatencyDistribution.constant(ms))
    return net


def test_response_priority_examples():
    net = probe_net({"A": 30, "B": 10})
    assert strategy_response_priority(["A", "B"], net) == "B"
    assert strategy_response_priority(["A", "B"], net, foreman="A") == "A"
    net = probe_net({"B": 20, "A": 20})
    assert strategy_response_priority(["B", "A"], net) == "A"


def test_response_priority_picks_local_and_skips_offline():
    net = probe_net({"A": 5, "B": 50, "C": 1})
    net.set_online("C", False)
    leaves = [ContentId.of(b"%d" % i) for i in range(4)]
    flat = flat_of(leaves, {leaves[0]: ("A", "B"), leaves[1]: ("B",), leaves[2]: ("C", "B"),
                            leaves[3]: ("A", "B")})
    a = select_providers(flat, "response_priority", 3, net=net, foreman="B")
    assert set(a.chosen.values()) == {"B"}
    a = select_providers(flat, "response_priority", 3, net=net, foreman="X")
    assert a.chosen[leaves[0]] == "A" and a.chosen[leaves[2]] == "B"
    assert a.elapsed == 50
    with pytest.raises(SchedulingFailure):
        strategy_response_priority(["C"], net)


def test_empty_provider_list_fails():
    leaf = ContentId.of(b"x")
    with pytest.raises(SchedulingFailure):
        select_providers(flat_of([leaf], {leaf: ()}), "load_balance")


def test_executor_peers_ranked_first():
    net = Network.create(3, LatencyDistribution.constant(1), executor_peers=1)
    ids = list(net.peers)
    assert candidates(ids[::-1], net, 2) == [ids[0], ids[2]]


# -- greedy provider resolving ------------------------------------------------

def gpr_setup(missing=False, size_chunks=8):
    net = const_net(n_peers=4, c=10)
    tree = publish(net, size_chunks, 4, "fat", placement="replicate")
    host = net.node_table[tree.root].host
    if missing:
        net.peers[host].store.remove(tree.leaves()[0])
    return net, tree, host


def test_gpr_hit_assigns_host_without_lookups():
    net, tree, host = gpr_setup()
    out = gpr_resolve(net, GprConfig(alpha=1 << 20, delta=150), tree.root)
    assert out.hit and out.extra_elapsed == 0 and out.lookups == 0
    assert set(out.assignment.chosen.values()) == {host}
    assert out.flat.rounds == 2


def test_gpr_miss_pays_delta_plus_one_phase():
    net, tree, host = gpr_setup(missing=True)
    out = gpr_resolve(net, GprConfig(alpha=1 << 20, delta=150), tree.root)
    assert not out.hit
    assert out.extra_elapsed == 150 + 10 and out.lookups == 8
    assert out.assignment.chosen[tree.leaves()[0]] != host or net.peers[host].store.has(tree.leaves()[0])


def test_gpr_bypassed_above_threshold():
    net, tree, _ = gpr_setup()
    assert gpr_resolve(net, GprConfig(alpha=10, delta=150), tree.root) is None


def test_gpr_fallback_failure_is_query_failure():
    net, tree, host = gpr_setup(missing=True)
    del net.provider_table[tree.leaves()[0]]
    with pytest.raises(QueryFailure):
        gpr_resolve(net, GprConfig(alpha=1 << 20, delta=150), tree.root)
