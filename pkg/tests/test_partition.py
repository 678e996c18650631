import networkx as nx
import numpy as np
import numpy.testing as npt
import pytest

from mgopf.partition import (
    PartitionError,
    build_plan,
    check_peo,
    mcs_order,
    micro_graph,
    slice_local,
    verify_chordal,
)

from conftest import random_network, random_partition


def test_ten_node_plan(ten_node):
    plan = build_plan(ten_node)
    assert [sorted(a.nodes) for a in plan.areas] == [[0, 1], [2, 3, 4, 5, 6, 9], [7, 8]]
    assert [sorted(e.nodes) for e in plan.extended] == [[0, 1, 2], [1, 2, 3, 4, 5, 6, 7, 9], [5, 7, 8]]
    assert plan.macro_edges == ((0, 1), (1, 2))
    assert plan.pcc_area == 0
    # two shared three-phase buses per link
    assert plan.shared[(0, 1)].size == 6
    assert plan.shared[(1, 2)].size == 6
    npt.assert_array_equal(plan.shared[(0, 1)], plan.shared[(1, 0)])


def test_shared_local_rows_point_at_shared_buses(ten_node):
    plan = build_plan(ten_node)
    for l, j in plan.macro_edges:
        for a, b in ((l, j), (j, l)):
            npt.assert_array_equal(plan.local_index[a][plan.shared_local(a, b)], plan.shared[(a, b)])


def test_default_single_area(random_networks):
    net = random_networks[0]
    plan = build_plan(net.__class__(net.buses, net.lines, net.dg_units))
    assert plan.n_areas == 1
    assert plan.macro_edges == ()


@pytest.mark.parametrize(
    "areas,match",
    [
        ([[0, 1], [2, 3, 4, 5, 6, 7, 8]], "not assigned"),
        ([[0, 1, 2], [2, 3, 4, 5, 6, 7, 8, 9]], "more than one"),
        ([[0, 1], [], [2, 3, 4, 5, 6, 7, 8, 9]], "empty"),
        ([[0, 1, 42], [2, 3, 4, 5, 6, 7, 8, 9]], "unknown"),
        ([[0], [1, 2, 3, 4, 5, 6, 7, 8, 9]], "nested"),
        ([[0, 1], [2, 3, 4, 6, 9], [5, 7, 8]], "not a tree"),
    ],
)
def test_invalid_partitions(ten_node, areas, match):
    with pytest.raises(PartitionError, match=match):
        build_plan(ten_node, areas)


def test_ten_node_chordal(ten_node):
    proof = verify_chordal(build_plan(ten_node))
    assert proof.chordal
    assert proof.cliques_match_areas
    assert proof.counterexample is None


def test_mcs_detects_chordless_square():
    adj = {0: {1, 3}, 1: {0, 2}, 2: {1, 3}, 3: {0, 2}}
    assert check_peo(adj, mcs_order(adj)) is not None
    adj[0].add(2)
    adj[2].add(0)
    assert check_peo(adj, mcs_order(adj)) is None


def test_chordality_against_networkx():
    gen = np.random.default_rng(7)
    for _ in range(10):
        net = random_network(gen, int(gen.integers(3, 9)))
        plan = random_partition(gen, net)
        adj = micro_graph(plan)
        g = nx.Graph()
        g.add_nodes_from(adj)
        g.add_edges_from((a, b) for a, nb in adj.items() for b in nb)
        proof = verify_chordal(plan)
        assert proof.chordal == nx.is_chordal(g)
        assert proof.cliques_match_areas


def test_slice_local(ten_node, rng):
    plan = build_plan(ten_node)
    m = rng.normal(size=(ten_node.size, ten_node.size))
    loc = plan.local_index[1]
    npt.assert_array_equal(slice_local(plan, m, 1), m[np.ix_(loc, loc)])


def test_to_local_rejects_foreign_rows(ten_node):
    plan = build_plan(ten_node)
    with pytest.raises(PartitionError):
        plan.to_local(0, [ten_node.size - 1])
