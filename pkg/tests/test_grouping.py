import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_partition
from groupfl import data, grouping as G, models, network
from groupfl.errors import DomainError, InvariantError


def line_topo(n):
    """Hosts on a line of switches, one host per switch: hop(i, j) = 2 + |i - j| (0 on the diagonal)."""
    adj = [[v for v in (u - 1, u + 1) if 0 <= v < n] for u in range(n)]
    return network.Topology.from_switch_graph(adj, list(range(n)))


def random_snap(n, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return G.GradientSnapshot.from_grads(rng.standard_normal((n, dim)), rng.integers(1, 6, n))


def two_cluster_topo():
    """Hosts 0-2 under one edge switch, 3-5 under an edge switch in another pod."""
    return network.build_fat_tree(4, 3, host_edges=[0, 0, 0, 7, 7, 7])


# -- snapshot and divergences ---------------------------------------------------

def test_snapshot_global_gradient_matches_pooled(sr4):
    part = tiny_partition(num_nodes=3)
    w = sr4.init_params(np.random.default_rng(0), 0.5)
    snap = G.snapshot(sr4, w, part, batch_cap=100, seed=0)
    assert np.allclose(snap.global_grad, models.gradient(sr4, w, *part.pooled()), atol=1e-9)
    again = G.snapshot(sr4, w, part, batch_cap=100, seed=99)
    assert np.array_equal(snap.grads, again.grads)


def test_snapshot_identical_nodes_have_global_gradient(sr4):
    ds = data.Dataset(np.ones((1, 4)), [1], 3)
    part = data.Partition(ds, [np.array([0])] * 3, [0, 0, 1])
    snap = G.snapshot(sr4, np.zeros(sr4.param_count), part, 1, 0)
    assert np.allclose(snap.grads, snap.global_grad, atol=1e-15)


def test_snapshot_rejects_inconsistent_global_gradient():
    with pytest.raises(InvariantError):
        G.GradientSnapshot(np.eye(2), np.zeros(2), np.array([1.0, 1.0]))


def test_group_divergence_trivial_cases():
    snap = random_snap(5)
    one = G.single_group(5)
    assert G.group_divergence(snap, one, 0) <= 1e-12
    m = G.Membership([0, 1, 1, 1, 1], [0, 1])
    assert G.group_divergence(snap, m, 0) == pytest.approx(np.linalg.norm(snap.grads[0] - snap.global_grad))


def test_group_divergence_tentative_matches_recomputation():
    snap = random_snap(4, seed=3)
    m = G.Membership([0, 0, 1, 1], [0, 2])
    g, s = snap.grads, snap.sizes
    for i, k in itertools.product(range(4), range(2)):
        members = [j for j in range(4) if (m.assign[j] == k or j == i)]
        mean = sum(s[j] * g[j] for j in members) / sum(s[j] for j in members)
        assert G.group_divergence(snap, m, k, tentative=i) == pytest.approx(
            float(np.linalg.norm(mean - snap.global_grad)), abs=1e-12)


# -- costs ---------------------------------------------------------------------

def test_assign_costs_match_manual_table():
    snap = random_snap(5, dim=2, seed=7)
    topo = line_topo(5)
    m = G.Membership([0, 0, 1, 1, 1], [1, 3])
    w = G.CostWeights(0.3, 0.7)
    got = [[G.cost_assign(snap, topo, m, w, i, k) for k in range(2)] for i in range(5)]

    def iid(i, k):
        members = [j for j in range(5) if m.assign[j] == k] + ([i] if m.assign[i] != k else [])
        tot = float(sum(snap.sizes[j] for j in members))
        mean = [sum(snap.sizes[j] * snap.grads[j][c] for j in members) / tot for c in range(2)]
        return math.hypot(*(mean[c] - snap.global_grad[c] for c in range(2)))

    def hop(i, j):
        return 0 if i == j else 2 + abs(i - j)

    c_iid, c_comm = iid(0, 0), hop(0, m.medoids[0])
    for i in range(5):
        for k in range(2):
            expect = 0.3 * iid(i, k) / c_iid + 0.7 * hop(i, m.medoids[k]) / c_comm
            assert got[i][k] == pytest.approx(expect, rel=1e-12)


def test_assign_cost_without_comm_weight_is_zero_for_identical_nodes():
    g = np.tile([0.5, -1.0], (4, 1))
    snap = G.GradientSnapshot.from_grads(g, [1, 2, 3, 4])
    m = G.Membership([0, 0, 1, 1], [0, 2])
    w = G.CostWeights(1.0, 0.0)
    assert all(G.cost_assign(snap, line_topo(4), m, w, i, k) == 0 for i in range(4) for k in range(2))


def test_comm_only_assign_prefers_nearest_medoid():
    snap = random_snap(6)
    topo = line_topo(6)
    m = G.Membership([0, 0, 0, 1, 1, 1], [0, 5])
    w = G.CostWeights(0.0, 1.0)
    for i in range(6):
        costs = [G.cost_assign(snap, topo, m, w, i, k) for k in range(2)]
        assert int(np.argmin(costs)) == int(np.argmin(topo.hop[i, m.medoids]))


def test_update_cost_trivial_cases_and_exhaustive_member_check():
    snap = random_snap(4, seed=5)
    topo = line_topo(4)
    solo = G.Membership([0, 1, 1, 1], [0, 1])
    assert G.cost_update(snap, topo, solo, G.CostWeights(0.0, 1.0), 0, 0) == 0.0
    same = G.GradientSnapshot.from_grads(np.array([[1.0, 1.0], [1.0, 1.0], [3.0, -1.0], [-1.0, 3.0]]), [1, 1, 1, 1])
    # node 0 gradient equals the global mean [1, 1] -> zero iid term
    m = G.Membership([0, 0, 0, 0], [0])
    assert G.cost_update(same, topo, m, G.CostWeights(1.0, 0.0), 0, 0) == 0.0
    w = G.CostWeights(0.5, 0.5)
    costs = [G.cost_update(snap, topo, m, w, i, 0) for i in range(4)]
    s = snap.sizes / snap.sizes.sum()
    raw_iid = [s[i] * np.linalg.norm(snap.grads[i] - snap.global_grad) for i in range(4)]
    raw_comm = [topo.hop[i].sum() for i in range(4)]
    expect = [0.5 * raw_iid[i] / raw_iid[0] + 0.5 * raw_comm[i] / raw_comm[0] for i in range(4)]
    assert np.allclose(costs, expect, rtol=1e-12)
    with pytest.raises(DomainError):
        G.cost_update(snap, topo, solo, w, 0, 1)


def test_normalizer_frozen_at_first_value_and_zero_falls_back():
    w = G.CostWeights()
    assert w.normalizer("A_iid", 4.0) == 4.0
    assert w.normalizer("A_iid", 9.0) == 4.0
    assert w.normalizer("A_comm", 0.0) == 1.0
    with pytest.raises(DomainError):
        G.CostWeights(0.0, 0.0)


# -- node grouping -------------------------------------------------------------

def test_one_group_per_node_has_zero_comm_cost():
    snap = random_snap(5)
    topo = line_topo(5)
    m = G.node_grouping(snap, topo, 5, G.CostWeights(), seed=0)
    assert sorted(m.medoids) == list(range(5))
    assert G.membership_costs(snap, topo, m)[1] == 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), K=st.integers(1, 4), a=st.floats(0.0, 1.0),
       tentative=st.booleans())
def test_assign_cost_never_increases_and_membership_valid(seed, K, a, tentative):
    snap = random_snap(8, seed=seed)
    topo = network.build_fat_tree(4, 2, seed=seed)
    w = G.CostWeights(a, 1.0 - a) if 0 < a < 1 else G.CostWeights(1.0, 1.0)
    m = G.node_grouping(snap, topo, K, w, seed=seed, max_steady=2, tentative=tentative)
    assert np.all(np.diff(m.cost_history) <= 1e-9)
    m.validate()
    assert m.num_groups == K and sorted(set(m.assign.tolist())) == list(range(K))


def test_scaling_both_alphas_keeps_the_membership():
    snap = random_snap(8, seed=4)
    topo = network.build_fat_tree(4, 2, seed=4)
    for seed in range(5):
        a = G.node_grouping(snap, topo, 3, G.CostWeights(0.3, 0.6), seed=seed)
        b = G.node_grouping(snap, topo, 3, G.CostWeights(3.0, 6.0), seed=seed)
        assert np.array_equal(a.assign, b.assign) and a.medoids == b.medoids


def test_identical_data_reduces_to_hop_clustering():
    g = np.tile([0.2, -0.4, 1.0], (6, 1))
    snap = G.GradientSnapshot.from_grads(g, [3, 1, 4, 1, 5, 9])
    topo = two_cluster_topo()
    for seed in range(5):
        a = G.node_grouping(snap, topo, 2, G.CostWeights(0.7, 0.3), seed=seed)
        b = G.node_grouping(snap, topo, 2, G.CostWeights(0.0, 1.0), seed=seed)
        assert a.canonical() == b.canonical()


def test_comm_only_grouping_matches_exhaustive_bipartition():
    snap = random_snap(6)
    topo = two_cluster_topo()
    best = min(sum(min(topo.hop[np.ix_(g, g)].sum(axis=1)) for g in (left, [i for i in range(6) if i not in left]))
               for r in range(1, 6) for left in map(list, itertools.combinations(range(6), r)) if 0 in left)
    for seed in range(10):
        m = G.node_grouping(snap, topo, 2, G.CostWeights(0.0, 1.0), seed=seed)
        hops = sum(topo.hop[i, m.medoids[m.assign[i]]] for i in range(6))
        assert hops == best == 8


def test_num_groups_out_of_range():
    with pytest.raises(DomainError):
        G.node_grouping(random_snap(3), line_topo(3), 4, G.CostWeights(), seed=0)


# -- baselines and brute force ------------------------------------------------------

def test_edge_grouping():
    m = G.edge_grouping(tiny_partition(6, 2))
    assert m.canonical() == ((0, 2, 4), (1, 3, 5)) and m.medoids == [0, 1]
    one = G.edge_grouping(tiny_partition(4, 1))
    assert one.num_groups == 1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), n=st.integers(1, 12), K=st.integers(1, 4))
def test_random_membership_and_json_roundtrip(seed, n, K):
    K = min(K, n)
    m = G.random_membership(n, K, np.random.default_rng(seed))
    m.validate()
    again = G.Membership.from_json(m.to_json())
    assert np.array_equal(again.assign, m.assign) and again.medoids == m.medoids


def test_membership_rejects_invalid():
    with pytest.raises(InvariantError):
        G.Membership([0, 1], [0, 0])
    with pytest.raises(InvariantError):
        G.Membership([0, 0], [0, 1])


def test_brute_force_small_cases():
    snap = random_snap(2)
    m, _ = G.brute_force_grouping(snap, line_topo(2), 2, G.CostWeights())
    assert m.canonical() == ((0,), (1,))
    snap5 = random_snap(5, seed=2)
    m1, cost = G.brute_force_grouping(snap5, line_topo(5), 1, G.CostWeights(1.0, 0.0))
    assert m1.num_groups == 1 and cost <= 1e-12  # a single group has no group-to-global gap
    with pytest.raises(DomainError):
        G.brute_force_grouping(random_snap(11), line_topo(11), 2, G.CostWeights())


def test_brute_force_never_worse_than_heuristic():
    snap = random_snap(6, seed=11)
    topo = two_cluster_topo()
    for seed in range(20):
        w = G.CostWeights()
        h = G.node_grouping(snap, topo, 2, w, seed=seed)
        _, opt = G.brute_force_grouping(snap, topo, 2, w)
        assert opt <= G.total_assign_cost(snap, topo, h, w) + 1e-12
