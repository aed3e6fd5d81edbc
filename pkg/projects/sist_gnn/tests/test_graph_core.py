import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errors import BoundsError, DomainError, ShapeError
from graph_core import (
    EdgeType, EdgeTypeGates, SnapshotGraph, augment, check_permutation, empty_snapshot, gated_adjacency,
    in_degree_augmented, incoming_message_count, neighbors, permute_graph, permute_rows, symmetrize,
)


@st.composite
def graphs(draw, max_nodes=12, max_edges=30):
    n = draw(st.integers(1, max_nodes))
    edges = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=max_edges))
    return SnapshotGraph.from_edges(n, edges)


@settings(max_examples=100, deadline=None)
@given(graphs())
def test_augmented_edge_count(g):
    ag = augment(g)
    assert ag.num_nodes == 2 * g.num_nodes
    assert ag.num_edges == 2 * g.num_edges + g.num_nodes


@settings(max_examples=50, deadline=None)
@given(graphs())
def test_lower_half_has_no_incoming_edges(g):
    ag = augment(g)
    assert np.all(ag.dst < g.num_nodes)
    deg = in_degree_augmented(ag, EdgeTypeGates())
    assert np.all(deg[g.num_nodes:] == 0)
    indeg = np.bincount(g.dst, minlength=g.num_nodes)
    assert np.array_equal(deg[:g.num_nodes], 2 * indeg + 1)


@settings(max_examples=50, deadline=None)
@given(graphs(), st.randoms(use_true_random=False))
def test_permutation_relabels_every_edge(g, random):
    perm = list(range(g.num_nodes))
    random.shuffle(perm)
    pg = permute_graph(g, perm)
    assert pg.edges == [(perm[u], perm[v]) for u, v in g.edges]
    ag, apg = augment(g), augment(pg)
    n = g.num_nodes
    lift = np.concatenate([np.asarray(perm), np.asarray(perm) + n])
    assert sorted(apg.edges) == sorted((int(lift[s]), int(lift[d]), t) for s, d, t in ag.edges)


def test_augment_block_order(small_graph):
    ag = augment(small_graph)
    e, n = small_graph.num_edges, small_graph.num_nodes
    assert ag.etype[:e].tolist() == [EdgeType.INTRA] * e
    assert ag.etype[e:2 * e].tolist() == [EdgeType.CROSS_NEIGHBOR] * e
    assert ag.etype[2 * e:].tolist() == [EdgeType.CROSS_SELF] * n
    assert (ag.src[e], ag.dst[e]) == (0 + n, 1)
    assert ag.edges[-1] == (3 + n, 3, EdgeType.CROSS_SELF)


def test_empty_snapshot_keeps_self_edges():
    ag = augment(empty_snapshot(3))
    assert ag.edges == [(3, 0, EdgeType.CROSS_SELF), (4, 1, EdgeType.CROSS_SELF), (5, 2, EdgeType.CROSS_SELF)]


def test_gated_adjacency_mean_rows(small_graph):
    adj = gated_adjacency(augment(small_graph), EdgeTypeGates())
    sums = np.asarray(adj.sum(axis=1)).ravel()
    assert sums[:4] == pytest.approx(np.ones(4))
    assert np.all(sums[4:] == 0)


def test_zero_gate_removes_edge_type(small_graph):
    ag = augment(small_graph)
    adj = gated_adjacency(ag, EdgeTypeGates(1.0, 0.0, 0.0), normalize=False).tocoo()
    assert set(zip(adj.col.tolist(), adj.row.tolist())) == set(small_graph.edges)


def test_parallel_edges_count_with_multiplicity():
    g = SnapshotGraph.from_edges(2, [(0, 1), (0, 1)])
    adj = gated_adjacency(augment(g), EdgeTypeGates(1.0, 0.0, 0.0), normalize=False)
    assert adj[1, 0] == 2.0


def test_incoming_message_count_rejects_lower_half(small_graph):
    ag = augment(small_graph)
    assert incoming_message_count(ag, 1) == 2 * 2 + 1
    with pytest.raises(DomainError):
        incoming_message_count(ag, small_graph.num_nodes)


def test_symmetrize_dedups_and_keeps_single_self_loop():
    g = SnapshotGraph.from_edges(3, [(0, 1), (1, 0), (0, 1), (2, 2)])
    s = symmetrize(g)
    assert sorted(s.edges) == [(0, 1), (1, 0), (2, 2)]
    assert neighbors(s, 0).tolist() == [1]
    assert neighbors(s, 2).tolist() == []


def test_permute_rows_inverse_of_relabel():
    x = np.arange(6.0).reshape(3, 2)
    out = permute_rows(x, [2, 0, 1])
    assert out[2].tolist() == x[0].tolist()
    assert out[0].tolist() == x[1].tolist()
    with pytest.raises(DomainError):
        check_permutation([0, 0, 1], 3)


def test_snapshot_validation():
    with pytest.raises(BoundsError):
        SnapshotGraph.from_edges(2, [(0, 2)])
    with pytest.raises(ShapeError):
        SnapshotGraph(3, np.array([0, 1]), np.array([1]))
    with pytest.raises(ShapeError):
        SnapshotGraph.from_edges(3, [(0, 1)], edge_timestamps=np.array([1.0, 2.0]))


def test_snapshot_arrays_are_read_only_copies():
    src = np.array([0, 1])
    g = SnapshotGraph(3, src, np.array([1, 2]))
    src[0] = 2
    assert g.src[0] == 0
    with pytest.raises(ValueError):
        g.src[0] = 1


def test_gates_must_be_finite():
    with pytest.raises(DomainError):
        EdgeTypeGates(float("nan"), 1.0, 1.0)
    assert EdgeTypeGates.of(0, 1, 0.5).as_array().tolist() == [0.0, 1.0, 0.5]


def test_non_integer_endpoints_are_named_in_error():
    with pytest.raises(DomainError, match="src"):
        SnapshotGraph(3, [0, 1.5], [1, 2])
    with pytest.raises(DomainError, match="dst"):
        SnapshotGraph(3, [0, 1], ["a", "b"])
    g = SnapshotGraph(3, np.array([0.0, 2.0]), np.array([1, 2]))
    assert g.src.dtype == np.int64 and g.src.tolist() == [0, 2]
