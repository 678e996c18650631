"""Area decomposition of a network for the distributed solver.

Given a partition of the buses into areas, each area is extended with its
first-neighbour boundary buses.  The local voltage matrix of an area is the
principal submatrix of the global one over the extended area.  Two
structural conditions make the decomposition exact: the macro graph of
areas must be a tree, and no extended area may be contained in another.
Under those conditions the graph induced by the local matrices is chordal
with the extended areas as maximal cliques, which :func:`verify_chordal`
checks directly.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .netmodel import NetworkModel
from .sdpcore import HermitianMatrix

__all__ = [
    "Area",
    "ExtendedArea",
    "PartitionError",
    "PartitionPlan",
    "ChordalProof",
    "build_plan",
    "verify_chordal",
    "slice_local",
    "micro_graph",
    "mcs_order",
]


class PartitionError(ValueError):
    """The requested areas violate a decomposition precondition."""


@dataclass(frozen=True)
class Area:
    id: int
    nodes: frozenset[int]


@dataclass(frozen=True)
class ExtendedArea:
    id: int
    nodes: frozenset[int]
    boundary: frozenset[int]


@dataclass(frozen=True)
class PartitionPlan:
    """Immutable decomposition data shared by all area workers.

    Attributes
    ----------
    areas, extended : tuple
        Indexed by area id ``0 .. L-1``.
    macro_edges : tuple of (l, j)
        Pairs ``l < j`` whose extended areas intersect.
    shared : dict
        ``(l, j) -> ndarray`` of global indices of the shared buses, in
        global order.  Present for both orientations.
    local_index : tuple of ndarray
        Global indices of each extended area, in global order; position in
        the array is the local row.
    pcc_area : int
    """

    net: NetworkModel
    areas: tuple[Area, ...]
    extended: tuple[ExtendedArea, ...]
    macro_edges: tuple[tuple[int, int], ...]
    shared: dict
    local_index: tuple[np.ndarray, ...]
    pcc_area: int
    owner: dict = field(default_factory=dict)

    @property
    def n_areas(self) -> int:
        return len(self.areas)

    def neighbors(self, l: int) -> list[int]:
        out = [j for a, j in self.macro_edges if a == l] + [a for a, j in self.macro_edges if j == l]
        return sorted(out)

    def shared_local(self, l: int, j: int) -> np.ndarray:
        """Local rows of area ``l`` that hold the buses shared with ``j``."""
        return np.searchsorted(self.local_index[l], self.shared[(l, j)])

    def to_local(self, l: int, global_idx: Iterable[int]) -> np.ndarray:
        loc = self.local_index[l]
        g = np.asarray(list(global_idx), dtype=int)
        pos = np.searchsorted(loc, g)
        bad = (pos >= loc.size) | (loc[np.minimum(pos, loc.size - 1)] != g)
        if np.any(bad):
            raise PartitionError(f"indices {g[bad].tolist()} are outside extended area {l}")
        return pos

    def summary(self) -> dict:
        return {
            "areas": [sorted(a.nodes) for a in self.areas],
            "extended_areas": [sorted(e.nodes) for e in self.extended],
            "macro_edges": [list(e) for e in self.macro_edges],
            "shared_index_counts": {f"{l}-{j}": int(self.shared[(l, j)].size) for l, j in self.macro_edges},
            "local_sizes": [int(x.size) for x in self.local_index],
            "pcc_area": self.pcc_area,
        }


def _find_cycle(n: int, edges: Sequence[tuple[int, int]]) -> list[int] | None:
    adj: dict[int, list[int]] = {i: [] for i in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    parent = {}
    for root in range(n):
        if root in parent:
            continue
        parent[root] = -1
        stack = [(root, -1)]
        while stack:
            u, p = stack.pop()
            for w in adj[u]:
                if w == p:
                    continue
                if w in parent:
                    # walk both ends up to the common ancestor
                    path_u, x = [], u
                    while x != -1:
                        path_u.append(x)
                        x = parent[x]
                    path_w, x = [], w
                    while x not in path_u:
                        path_w.append(x)
                        x = parent[x]
                    cut = path_u.index(x)
                    return path_u[: cut + 1] + path_w[::-1]
                parent[w] = u
                stack.append((w, u))
    return None


def build_plan(net: NetworkModel, areas: Sequence[Iterable[int]] | None = None) -> PartitionPlan:
    """Extended areas, macro graph and shared index sets for ``areas``.

    ``areas`` defaults to the partition stored with the network, or a
    single area when none is stored.

    Raises
    ------
    PartitionError
        Not a partition, macro graph not a tree, or nested extended areas.
    """
    if areas is None:
        areas = net.areas if net.areas is not None else [[b.id for b in net.buses]]
    area_sets = [frozenset(int(n) for n in a) for a in areas]
    all_ids = {b.id for b in net.buses}
    seen: set[int] = set()
    for l, a in enumerate(area_sets):
        if not a:
            raise PartitionError(f"area {l} is empty")
        unknown = a - all_ids
        if unknown:
            raise PartitionError(f"area {l} references unknown buses {sorted(unknown)}")
        dup = a & seen
        if dup:
            raise PartitionError(f"buses {sorted(dup)} belong to more than one area")
        seen |= a
    if seen != all_ids:
        raise PartitionError(f"buses {sorted(all_ids - seen)} are not assigned to any area")

    nbrs = {b.id: set(net.neighbors(b.id)) for b in net.buses}
    extended = []
    for l, a in enumerate(area_sets):
        bnd = set()
        for n in a:
            bnd |= nbrs[n] - a
        extended.append(ExtendedArea(l, a | frozenset(bnd), frozenset(bnd)))

    L = len(area_sets)
    macro = [
        (l, j)
        for l in range(L)
        for j in range(l + 1, L)
        if extended[l].nodes & extended[j].nodes
    ]
    cycle = _find_cycle(L, macro)
    if cycle is not None:
        raise PartitionError(f"macro graph is not a tree; cycle through areas {cycle}")
    if L > 1 and len(macro) != L - 1:
        raise PartitionError("macro graph is disconnected")
    for l in range(L):
        for j in range(L):
            if l != j and extended[l].nodes <= extended[j].nodes:
                raise PartitionError(f"extended area {l} is nested in extended area {j}")

    idx = net.index

    def gidx(nodes) -> np.ndarray:
        return np.sort(np.concatenate([idx.bus_indices(n) for n in nodes]))

    local_index = tuple(gidx(e.nodes) for e in extended)
    shared = {}
    for l, j in macro:
        s = gidx(extended[l].nodes & extended[j].nodes)
        shared[(l, j)] = s
        shared[(j, l)] = s
    owner = {n: l for l, a in enumerate(area_sets) for n in a}
    return PartitionPlan(
        net=net,
        areas=tuple(Area(l, a) for l, a in enumerate(area_sets)),
        extended=tuple(extended),
        macro_edges=tuple(macro),
        shared=shared,
        local_index=local_index,
        pcc_area=owner[net.pcc_bus.id],
        owner=owner,
    )


# ---------------------------------------------------------------------------
# Chordality
# ---------------------------------------------------------------------------


def micro_graph(plan: PartitionPlan) -> dict[int, set[int]]:
    """Adjacency of the node-phase graph induced by the local matrices."""
    adj: dict[int, set[int]] = {i: set() for i in range(plan.net.size)}
    for loc in plan.local_index:
        members = set(int(i) for i in loc)
        for i in members:
            adj[i] |= members - {i}
    return adj


def mcs_order(adj: dict[int, set[int]]) -> list[int]:
    """Maximum cardinality search; returns a candidate elimination order.

    Ties are broken by the smallest vertex label so the result is
    deterministic.
    """
    weight = {v: 0 for v in adj}
    numbered: list[int] = []
    unnumbered = set(adj)
    while unnumbered:
        best = max(unnumbered, key=lambda v: (weight[v], -v))
        numbered.append(best)
        unnumbered.remove(best)
        for w in adj[best]:
            if w in unnumbered:
                weight[w] += 1
    return numbered[::-1]


@dataclass(frozen=True)
class ChordalProof:
    """Outcome of :func:`verify_chordal`.

    ``peo`` is a perfect elimination ordering when ``chordal`` is true,
    otherwise ``counterexample`` holds a chordless cycle of length >= 4.
    """

    chordal: bool
    peo: tuple[int, ...]
    cliques: tuple[frozenset[int], ...]
    cliques_match_areas: bool
    counterexample: tuple[int, ...] | None = None


def _chordless_cycle(adj, v, x, y) -> tuple[int, ...] | None:
    blocked = (adj[v] | {v}) - {x, y}
    prev = {x: None}
    dq = deque([x])
    while dq:
        u = dq.popleft()
        if u == y:
            path = []
            while u is not None:
                path.append(u)
                u = prev[u]
            return (v,) + tuple(path[::-1])
        for w in sorted(adj[u]):
            if w not in prev and w not in blocked:
                prev[w] = u
                dq.append(w)
    return None


def check_peo(adj: dict[int, set[int]], order: Sequence[int]):
    """Return ``None`` if ``order`` is a perfect elimination ordering.

    Otherwise returns ``(v, x, y)`` with ``x, y`` later neighbours of ``v``
    that are not adjacent.
    """
    pos = {v: k for k, v in enumerate(order)}
    for v in order:
        later = [w for w in adj[v] if pos[w] > pos[v]]
        if not later:
            continue
        u = min(later, key=pos.__getitem__)
        for w in later:
            if w != u and w not in adj[u]:
                return v, u, w
    return None


def verify_chordal(plan: PartitionPlan) -> ChordalProof:
    """Check that the micro graph is chordal with extended-area cliques."""
    adj = micro_graph(plan)
    order = mcs_order(adj)
    bad = check_peo(adj, order)
    if bad is not None:
        cyc = _chordless_cycle(adj, *bad)
        return ChordalProof(False, tuple(order), (), False, cyc)
    pos = {v: k for k, v in enumerate(order)}
    cand = [frozenset({v} | {w for w in adj[v] if pos[w] > pos[v]}) for v in order]
    maximal = {c for c in cand if not any(c < d for d in cand)}
    cliques = tuple(sorted(maximal, key=lambda c: sorted(c)))
    area_sets = {frozenset(int(i) for i in loc) for loc in plan.local_index}
    return ChordalProof(True, tuple(order), cliques, set(cliques) == area_sets, None)


# ---------------------------------------------------------------------------
# Local slicing
# ---------------------------------------------------------------------------


def slice_local(plan: PartitionPlan, matrix, l: int):
    """Restrict a global matrix to extended area ``l``.

    A :class:`HermitianMatrix` must have its support inside the area
    (otherwise the constraint would be misassigned); a dense array is
    simply sliced.
    """
    loc = plan.local_index[l]
    if isinstance(matrix, HermitianMatrix):
        sup = matrix.support()
        outside = np.setdiff1d(sup, loc)
        if outside.size:
            pairs = [plan.net.index.pair(int(i)) for i in outside[:3]]
            raise PartitionError(
                f"matrix support {pairs} lies outside extended area {l}"
            )
        return matrix.submatrix(loc)
    m = np.asarray(matrix)
    return m[np.ix_(loc, loc)]
