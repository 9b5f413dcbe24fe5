"""Hypergraph structures over slot interactions, and hyperedge convolution.

A hypergraph stores its nodes as sorted global ids plus hyperedges as arrays
of local row indices. Convolution propagates node features through the
symmetric normalized operator

    A = Dv^{-1/2} H W De^{-1} H^T Dv^{-1/2}

which is computed either as an explicit dense product (the test oracle) or as
a factored sparse pipeline (the production path); both are exact to
round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .errors import ContractError, StructureError
from .numerics import Tape, Tensor

DEFAULT_NEIGHBOR_CAP = 20
DEFAULT_DEPTH = 3


class Hypergraph:
    """Nodes (global ids) plus hyperedges (arrays of local node rows)."""

    def __init__(self, node_ids, edges, kind: str, edge_weights=None):
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        if self.node_ids.ndim != 1 or self.node_ids.size == 0:
            raise StructureError("node_ids must be a non-empty 1-D array")
        if (np.diff(self.node_ids) <= 0).any():
            raise StructureError("node_ids must be strictly increasing")
        self.kind = kind
        self.edges = []
        for e in edges:
            arr = np.unique(np.asarray(e, dtype=np.int64))
            if arr.size == 0:
                raise StructureError("empty hyperedge")
            if arr[0] < 0 or arr[-1] >= self.node_ids.size:
                raise StructureError("hyperedge references unknown node row")
            self.edges.append(arr)
        if not self.edges:
            raise StructureError("hypergraph needs at least one hyperedge")
        if edge_weights is None:
            self.edge_weights = np.ones(len(self.edges))
        else:
            self.edge_weights = np.asarray(edge_weights, dtype=np.float64)
            if self.edge_weights.shape != (len(self.edges),):
                raise StructureError("one weight per hyperedge required")
            if (self.edge_weights <= 0).any():
                raise StructureError("edge weights must be positive")
        dv = np.zeros(self.node_ids.size)
        for e in self.edges:
            dv[e] += 1.0
        if (dv == 0).any():
            raise StructureError(
                "isolated node present; drop it before building the graph")
        self._node_degree = dv

    @property
    def num_nodes(self) -> int:
        return self.node_ids.size

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def incidence(self) -> np.ndarray:
        """Dense |V| x |E| 0/1 incidence matrix H."""
        h = np.zeros((self.num_nodes, self.num_edges))
        for j, e in enumerate(self.edges):
            h[e, j] = 1.0
        return h

    def degrees(self) -> tuple[np.ndarray, np.ndarray]:
        """(node degrees Dv, edge degrees De); both strictly positive."""
        de = np.array([float(e.size) for e in self.edges])
        return self._node_degree.copy(), de

    def edge_signature(self) -> tuple:
        """Hashable identity of the edge structure (for view dedup)."""
        return tuple(tuple(int(v) for v in e) for e in self.edges)


def propagation_matrix(graph: Hypergraph) -> np.ndarray:
    """The explicit five-factor dense product; reference implementation."""
    h = graph.incidence()
    dv, de = graph.degrees()
    dvm12 = np.diag(dv ** -0.5)
    w = np.diag(graph.edge_weights)
    dem1 = np.diag(1.0 / de)
    return dvm12 @ h @ w @ dem1 @ h.T @ dvm12


class PropagationOperator:
    """Factored sparse application of the propagation matrix.

    apply(X) evaluates Dv^{-1/2} (H ((W/De) (H^T (Dv^{-1/2} X)))) without ever
    forming the dense |V| x |V| matrix. The operator is symmetric, so the
    autodiff backward pass reuses apply().
    """

    def __init__(self, graph: Hypergraph):
        rows = np.concatenate(graph.edges)
        cols = np.concatenate([np.full(e.size, j, dtype=np.int64)
                               for j, e in enumerate(graph.edges)])
        self._h = sparse.csr_matrix(
            (np.ones(rows.size), (rows, cols)),
            shape=(graph.num_nodes, graph.num_edges))
        dv, de = graph.degrees()
        self._dvm12 = (dv ** -0.5).reshape(-1, 1)
        self._edge_scale = (graph.edge_weights / de).reshape(-1, 1)
        self.dim = graph.num_nodes

    def apply(self, x: np.ndarray) -> np.ndarray:
        y = self._h.T @ (self._dvm12 * x)
        y *= self._edge_scale
        return self._dvm12 * (self._h @ y)


def hgcn_layer(tape: Tape, x: Tensor, operator: PropagationOperator,
               theta: Tensor) -> Tensor:
    """One hyperedge-convolution layer: relu(A @ X @ Theta)."""
    return tape.relu(tape.matmul(tape.propagate(operator, x), theta))


def hgcn_stack(tape: Tape, x: Tensor, operator: PropagationOperator,
               thetas: list[Tensor]) -> Tensor:
    """Stacked convolution layers; returns the final activation."""
    if not thetas:
        raise ContractError("hgcn_stack needs at least one layer")
    out = x
    for theta in thetas:
        out = hgcn_layer(tape, out, operator, theta)
    return out


# ------------------------------------------------------------------ builders


def _cap_edge(members: np.ndarray, cap: int | None, seed: int,
              slot_index: int, ordinal: int) -> np.ndarray:
    if cap is None or members.size <= cap:
        return members
    rng = np.random.default_rng(
        np.random.SeedSequence((seed, slot_index, ordinal)))
    return np.sort(rng.choice(members, size=cap, replace=False))


@dataclass
class GroupHypergraphSet:
    """Per-modality user hypergraphs for one slot, plus their merger.

    A hyperedge is anchored on (item, modality): the users who clicked the
    item in the slot and whose dominant interest is that modality. Singleton
    hyperedges are kept. `merged` concatenates every modality's hyperedge
    group over the union node set and is what the model convolves.
    """
    slot_index: int
    graphs: dict[str, Hypergraph]
    merged: Hypergraph | None


def build_group_hypergraphs(log, record_indices, dominant: np.ndarray,
                            modalities: list[str], slot_index: int,
                            neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                            seed: int = 0) -> GroupHypergraphSet:
    """Bucket the slot's clicked records by (item, dominant modality of the
    clicking user) and emit one user-hyperedge per non-empty bucket."""
    idx = np.asarray(record_indices, dtype=np.int64)
    clicked = idx[log.labels[idx] == 1]
    buckets: dict[tuple[int, int], set[int]] = {}
    for r in clicked:
        u = int(log.users[r])
        buckets.setdefault((int(log.items[r]), int(dominant[u])), set()).add(u)

    per_mod_edges: dict[int, list[np.ndarray]] = {}
    ordinal = 0
    for (item, mod) in sorted(buckets):
        members = np.array(sorted(buckets[(item, mod)]), dtype=np.int64)
        members = _cap_edge(members, neighbor_cap, seed, slot_index, ordinal)
        ordinal += 1
        per_mod_edges.setdefault(mod, []).append(members)

    graphs: dict[str, Hypergraph] = {}
    for mi, m in enumerate(modalities):
        edges = per_mod_edges.get(mi, [])
        if not edges:
            continue
        users = np.unique(np.concatenate(edges))
        lookup = {int(u): i for i, u in enumerate(users)}
        local = [np.array([lookup[int(u)] for u in e], dtype=np.int64)
                 for e in edges]
        graphs[m] = Hypergraph(users, local, kind="user")
    merged = merge_hypergraphs(list(graphs.values())) if graphs else None
    return GroupHypergraphSet(slot_index, graphs, merged)


@dataclass
class ItemHypergraphSet:
    """Per-modality item hypergraphs for one slot.

    In modality m's view there is one hyperedge per active user: the items
    the user clicked in the slot that carry modality m. `distinct` dedupes
    structurally identical views (with their multiplicity) so the model
    convolves each distinct view once and averages; `group` concatenates all
    views, so |group.edges| <= (#modalities) * (#active users).
    """
    slot_index: int
    views: dict[str, Hypergraph]
    distinct: list[tuple[Hypergraph, int, list[str]]] = field(default_factory=list)
    group: Hypergraph | None = None


def build_item_hypergraphs(log, record_indices, present: dict[str, np.ndarray],
                           modalities: list[str], slot_index: int,
                           neighbor_cap: int | None = DEFAULT_NEIGHBOR_CAP,
                           seed: int = 0) -> ItemHypergraphSet:
    idx = np.asarray(record_indices, dtype=np.int64)
    clicked = idx[log.labels[idx] == 1]
    by_user: dict[int, set[int]] = {}
    for r in clicked:
        by_user.setdefault(int(log.users[r]), set()).add(int(log.items[r]))

    views: dict[str, Hypergraph] = {}
    for mi, m in enumerate(modalities):
        mask = present[m]
        edges = []
        ordinal = 0
        for u in sorted(by_user):
            members = np.array(sorted(i for i in by_user[u] if mask[i]),
                               dtype=np.int64)
            if members.size == 0:
                continue
            edges.append(_cap_edge(members, neighbor_cap,
                                   seed + 1 + mi, slot_index, ordinal))
            ordinal += 1
        if not edges:
            continue
        items = np.unique(np.concatenate(edges))
        lookup = {int(i): j for j, i in enumerate(items)}
        local = [np.array([lookup[int(i)] for i in e], dtype=np.int64)
                 for e in edges]
        views[m] = Hypergraph(items, local, kind="item")

    out = ItemHypergraphSet(slot_index, views)
    seen: dict[tuple, int] = {}
    for m in modalities:
        g = views.get(m)
        if g is None:
            continue
        key = (tuple(int(i) for i in g.node_ids), g.edge_signature())
        if key in seen:
            entry = out.distinct[seen[key]]
            out.distinct[seen[key]] = (entry[0], entry[1] + 1, entry[2] + [m])
        else:
            seen[key] = len(out.distinct)
            out.distinct.append((g, 1, [m]))
    if views:
        out.group = merge_hypergraphs(list(views.values()))
    return out


def merge_hypergraphs(graphs: list[Hypergraph]) -> Hypergraph:
    """Concatenate hyperedge groups over the union node set."""
    if not graphs:
        raise ContractError("nothing to merge")
    kinds = {g.kind for g in graphs}
    if len(kinds) != 1:
        raise StructureError(f"cannot merge node kinds {sorted(kinds)}")
    union = np.unique(np.concatenate([g.node_ids for g in graphs]))
    lookup = {int(v): i for i, v in enumerate(union)}
    edges, weights = [], []
    for g in graphs:
        remap = np.array([lookup[int(v)] for v in g.node_ids], dtype=np.int64)
        for e, w in zip(g.edges, g.edge_weights):
            edges.append(remap[e])
            weights.append(w)
    return Hypergraph(union, edges, kinds.pop(), np.array(weights))


def dump_edge_list(graph: Hypergraph, path) -> None:
    """Human-readable hyperedge dump: `ordinal weight: global ids...`."""
    with open(path, "w") as fh:
        fh.write(f"# {graph.kind} hypergraph: {graph.num_nodes} nodes, "
                 f"{graph.num_edges} hyperedges\n")
        for j, e in enumerate(graph.edges):
            ids = " ".join(str(int(graph.node_ids[v])) for v in e)
            fh.write(f"{j} {repr(float(graph.edge_weights[j]))}: {ids}\n")
