"""Hypergraph oracles: degrees, the five-factor propagation product, the
sparse fast path, and the slot builders."""

import numpy as np
import pytest
from util_graphs import random_hypergraph

from hgctr.data import InteractionLog
from hgctr.errors import ContractError, StructureError
from hgctr.hypergraph import (
    GroupHypergraphSet,
    Hypergraph,
    PropagationOperator,
    build_group_hypergraphs,
    build_item_hypergraphs,
    dump_edge_list,
    hgcn_layer,
    hgcn_stack,
    merge_hypergraphs,
    propagation_matrix,
)
from hgctr.numerics import Tape

RNG = np.random.default_rng(424242)


def test_degrees_match_loop_oracle():
    for _ in range(20):
        g = random_hypergraph(RNG)
        dv, de = g.degrees()
        h = g.incidence()
        for i in range(g.num_nodes):
            assert dv[i] == sum(h[i, j] for j in range(g.num_edges))
        for j in range(g.num_edges):
            assert de[j] == len(g.edges[j])
        assert (dv > 0).all() and (de > 0).all()


def test_propagation_matrix_matches_entrywise_formula():
    g = random_hypergraph(RNG, max_nodes=12)
    a = propagation_matrix(g)
    dv, de = g.degrees()
    h = g.incidence()
    w = g.edge_weights
    for i in range(g.num_nodes):
        for j in range(g.num_nodes):
            expect = sum(w[e] / de[e] * h[i, e] * h[j, e]
                         for e in range(g.num_edges)) / np.sqrt(dv[i] * dv[j])
            assert a[i, j] == pytest.approx(expect, abs=1e-12)


def test_propagation_matrix_symmetric_and_psd():
    for _ in range(25):
        g = random_hypergraph(RNG)
        a = propagation_matrix(g)
        assert np.abs(a - a.T).max() < 1e-12
        assert np.linalg.eigvalsh(a).min() > -1e-10


def test_sparse_operator_matches_dense_product():
    for _ in range(25):
        g = random_hypergraph(RNG)
        op = PropagationOperator(g)
        x = RNG.standard_normal((g.num_nodes, 5))
        assert np.abs(op.apply(x) - propagation_matrix(g) @ x).max() < 1e-10


def test_sparse_operator_is_bit_deterministic():
    g = random_hypergraph(RNG)
    x = RNG.standard_normal((g.num_nodes, 4))
    op = PropagationOperator(g)
    assert np.array_equal(op.apply(x), op.apply(x))
    assert np.array_equal(op.apply(x), PropagationOperator(g).apply(x))


def test_hgcn_layer_matches_dense_oracle():
    g = random_hypergraph(RNG)
    x = RNG.standard_normal((g.num_nodes, 6))
    theta = RNG.standard_normal((6, 4))
    tape = Tape()
    out = hgcn_layer(tape, tape.const(x), PropagationOperator(g),
                     tape.const(theta))
    expect = np.maximum(propagation_matrix(g) @ x @ theta, 0.0)
    assert np.abs(out.value - expect).max() < 1e-10


def test_hgcn_stack_composes_three_layers():
    g = random_hypergraph(RNG)
    d = 5
    x = RNG.standard_normal((g.num_nodes, d))
    thetas = [RNG.standard_normal((d, d)) for _ in range(3)]
    tape = Tape()
    out = hgcn_stack(tape, tape.const(x), PropagationOperator(g),
                     [tape.const(t) for t in thetas])
    a = propagation_matrix(g)
    expect = x
    for t in thetas:
        expect = np.maximum(a @ expect @ t, 0.0)
    assert np.abs(out.value - expect).max() < 1e-10
    with pytest.raises(ContractError):
        hgcn_stack(tape, tape.const(x), PropagationOperator(g), [])


def test_propagation_is_permutation_equivariant():
    g = random_hypergraph(RNG, max_nodes=15)
    perm = RNG.permutation(g.num_nodes)
    inv = np.argsort(perm)
    # relabel node rows by perm: new row inv[v] holds old node v
    permuted = Hypergraph(np.arange(g.num_nodes),
                          [np.sort(inv[e]) for e in g.edges],
                          kind=g.kind, edge_weights=g.edge_weights)
    x = RNG.standard_normal((g.num_nodes, 3))
    base = PropagationOperator(g).apply(x)
    shuffled = PropagationOperator(permuted).apply(x[perm])
    assert np.abs(shuffled - base[perm]).max() < 1e-10


def test_structure_validation():
    with pytest.raises(StructureError):
        Hypergraph([0, 1, 2], [[0, 1]], kind="user")  # node 2 isolated
    with pytest.raises(StructureError):
        Hypergraph([0, 1], [[0, 1], []], kind="user")
    with pytest.raises(StructureError):
        Hypergraph([0, 1], [[0, 5]], kind="user")
    with pytest.raises(StructureError):
        Hypergraph([1, 1, 2], [[0, 1, 2]], kind="user")  # duplicate ids
    with pytest.raises(StructureError):
        Hypergraph([0, 1], [[0, 1]], kind="user", edge_weights=[0.0])
    g = Hypergraph([4, 9], [[0, 1], [1]], kind="item")
    assert g.num_nodes == 2 and g.num_edges == 2


# ------------------------------------------------------------------ builders


def tiny_slot():
    # item 10: users 1,2 (dominant 0) and 3 (dominant 1); item 11: user 1;
    # record 4 is a non-click and must be ignored
    log = InteractionLog(users=[1, 2, 3, 1, 2],
                         items=[10, 10, 10, 11, 11],
                         timestamps=[5, 6, 7, 8, 9],
                         labels=[1, 1, 1, 1, 0])
    dominant = np.array([0, 0, 0, 1])
    return log, dominant


def test_group_builder_buckets_by_item_and_dominant_modality():
    log, dominant = tiny_slot()
    out = build_group_hypergraphs(log, np.arange(5), dominant,
                                  ["visual", "acoustic"], slot_index=0)
    assert isinstance(out, GroupHypergraphSet)
    vis = out.graphs["visual"]
    assert list(vis.node_ids) == [1, 2]
    assert [list(vis.node_ids[e]) for e in vis.edges] == [[1, 2], [1]]
    aco = out.graphs["acoustic"]
    assert list(aco.node_ids) == [3]
    assert [list(aco.node_ids[e]) for e in aco.edges] == [[3]]  # singleton kept
    merged = out.merged
    assert list(merged.node_ids) == [1, 2, 3]
    assert merged.num_edges == vis.num_edges + aco.num_edges


def test_group_builder_is_deterministic_and_sorted():
    n = 500
    log = InteractionLog(RNG.integers(0, 40, n), RNG.integers(0, 30, n),
                         RNG.integers(0, 1000, n), RNG.integers(0, 2, n))
    dominant = RNG.integers(0, 3, 40)
    a = build_group_hypergraphs(log, np.arange(n), dominant,
                                ["v", "a", "t"], slot_index=3, seed=1)
    b = build_group_hypergraphs(log, np.arange(n), dominant,
                                ["v", "a", "t"], slot_index=3, seed=1)
    for m in a.graphs:
        assert np.array_equal(a.graphs[m].node_ids, b.graphs[m].node_ids)
        assert a.graphs[m].edge_signature() == b.graphs[m].edge_signature()
        for e in a.graphs[m].edges:
            assert (np.diff(e) > 0).all()  # sorted unique emission


def test_item_builder_views_and_dedup():
    log, _ = tiny_slot()
    present = {"visual": np.ones(12, dtype=bool),
               "textual": np.ones(12, dtype=bool)}
    present["textual"][11] = False  # item 11 has no textual features
    out = build_item_hypergraphs(log, np.arange(5), present,
                                 ["visual", "textual"], slot_index=0)
    vis = out.views["visual"]
    # user 1 clicked items 10,11; users 2,3 clicked item 10
    assert list(vis.node_ids) == [10, 11]
    assert [list(vis.node_ids[e]) for e in vis.edges] == [[10, 11], [10], [10]]
    tex = out.views["textual"]
    assert list(tex.node_ids) == [10]
    assert [list(tex.node_ids[e]) for e in tex.edges] == [[10], [10], [10]]
    # views differ structurally, so both stay distinct
    assert len(out.distinct) == 2
    assert out.group.num_edges == vis.num_edges + tex.num_edges


def test_item_builder_dedupes_identical_views():
    log, _ = tiny_slot()
    present = {m: np.ones(12, dtype=bool) for m in ("v", "a", "t")}
    out = build_item_hypergraphs(log, np.arange(5), present, ["v", "a", "t"],
                                 slot_index=0)
    assert len(out.distinct) == 1
    graph, multiplicity, mods = out.distinct[0]
    assert multiplicity == 3 and mods == ["v", "a", "t"]
    assert out.group.num_edges == 3 * graph.num_edges


def test_neighbor_cap_bounds_edge_size_deterministically():
    users = np.arange(60)
    log = InteractionLog(users, np.zeros(60, dtype=int), np.arange(60),
                         np.ones(60, dtype=int))
    dom = np.zeros(60, dtype=int)
    a = build_group_hypergraphs(log, np.arange(60), dom, ["v"], slot_index=2,
                                neighbor_cap=15, seed=9)
    b = build_group_hypergraphs(log, np.arange(60), dom, ["v"], slot_index=2,
                                neighbor_cap=15, seed=9)
    (edge_a,) = a.graphs["v"].edges
    (edge_b,) = b.graphs["v"].edges
    assert edge_a.size == 15
    assert np.array_equal(edge_a, edge_b)
    assert np.isin(a.graphs["v"].node_ids[edge_a], users).all()
    c = build_group_hypergraphs(log, np.arange(60), dom, ["v"], slot_index=2,
                                neighbor_cap=15, seed=10)
    assert not np.array_equal(a.graphs["v"].node_ids[edge_a],
                              c.graphs["v"].node_ids[c.graphs["v"].edges[0]])


def test_builder_cardinality_bounds_on_random_slots():
    mods = ["v", "a", "t"]
    for trial in range(30):
        rng = np.random.default_rng(trial)
        n = int(rng.integers(5, 400))
        nu, ni = int(rng.integers(2, 40)), int(rng.integers(2, 50))
        log = InteractionLog(rng.integers(0, nu, n), rng.integers(0, ni, n),
                             rng.integers(0, 100, n), rng.integers(0, 2, n))
        present = {m: rng.random(ni) < 0.8 for m in mods}
        dom = rng.integers(0, 3, nu)
        item_set = build_item_hypergraphs(log, np.arange(n), present, mods,
                                          slot_index=0, seed=trial)
        active_users = np.unique(
            log.users[np.arange(n)][log.labels == 1]).size
        for m, g in item_set.views.items():
            assert g.num_edges <= active_users
        if item_set.group is not None:
            assert item_set.group.num_edges <= len(mods) * active_users
        group_set = build_group_hypergraphs(log, np.arange(n), dom, mods,
                                            slot_index=0, seed=trial)
        clicked = int((log.labels == 1).sum())
        if group_set.merged is not None:
            assert group_set.merged.num_edges <= clicked


def test_builders_handle_clickless_slot():
    log = InteractionLog([0, 1], [0, 1], [1, 2], [0, 0])
    out = build_group_hypergraphs(log, np.arange(2), np.zeros(2, dtype=int),
                                  ["v"], slot_index=0)
    assert out.merged is None and out.graphs == {}
    iout = build_item_hypergraphs(log, np.arange(2),
                                  {"v": np.ones(2, dtype=bool)}, ["v"], 0)
    assert iout.group is None and iout.views == {}


def test_merge_rejects_mixed_kinds():
    a = Hypergraph([0, 1], [[0, 1]], kind="user")
    b = Hypergraph([0, 1], [[0, 1]], kind="item")
    with pytest.raises(StructureError):
        merge_hypergraphs([a, b])
    with pytest.raises(ContractError):
        merge_hypergraphs([])


def test_dump_edge_list(tmp_path):
    g = Hypergraph([4, 9, 12], [[0, 2], [1]], kind="item",
                   edge_weights=[1.0, 2.5])
    path = tmp_path / "edges.txt"
    dump_edge_list(g, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    assert lines[1] == "0 1.0: 4 12"
    assert lines[2] == "1 2.5: 9"
