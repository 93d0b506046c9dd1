"""User-item bipartite graph, item-side knowledge graph and their union.

Index conventions
-----------------
Items and entities share one index space: items occupy ``0 .. item_count-1``
and pure entities follow.  A ``NodeRef`` of kind ``ENTITY`` therefore carries
an index in ``[item_count, entity_count)``, while an ``ITEM`` ref's index is
valid both as an item ordinal and as a row of the shared entity table.

KG relation ``2k`` has its inverse at ``2k + 1``.  The user-item interaction
relation is the first ordinal after the KG relations.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np
from scipy import sparse


class GraphError(ValueError):
    """Structural problem in graph construction or a query against it."""


class Kind(enum.Enum):
    USER = "U"
    ITEM = "I"
    ENTITY = "E"


class NodeRef(NamedTuple):
    kind: Kind
    index: int

    def __str__(self) -> str:
        return f"{self.kind.value}{self.index}"


def inverse_relation(r: int) -> int:
    return r ^ 1


class Triplet(NamedTuple):
    head: int
    relation: int
    tail: int


def _group(keys: np.ndarray, values: np.ndarray, n: int) -> tuple[np.ndarray, ...]:
    bounds = np.searchsorted(keys, np.arange(n + 1))
    return tuple(values[bounds[k]:bounds[k + 1]] for k in range(n))


@dataclass(frozen=True, eq=False)
class BipartiteGraph:
    """Deduplicated user-item interactions with both adjacency directions."""

    user_count: int
    item_count: int
    users: np.ndarray  # edge arrays sorted by (user, item)
    items: np.ndarray
    user_adjacency: tuple[np.ndarray, ...] = field(repr=False)
    item_adjacency: tuple[np.ndarray, ...] = field(repr=False)

    @classmethod
    def from_edges(cls, user_count: int, item_count: int, edges: Iterable[tuple[int, int]]) -> "BipartiteGraph":
        arr = np.array(list(edges), dtype=np.int64).reshape(-1, 2)
        if arr.size:
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= user_count:
                bad = arr[(arr[:, 0] < 0) | (arr[:, 0] >= user_count), 0][0]
                raise GraphError(f"user index {bad} outside [0, {user_count})")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= item_count:
                bad = arr[(arr[:, 1] < 0) | (arr[:, 1] >= item_count), 1][0]
                raise GraphError(f"item index {bad} outside [0, {item_count})")
            arr = np.unique(arr, axis=0)
        users, items = arr[:, 0].copy(), arr[:, 1].copy()
        order = np.lexsort((users, items))
        return cls(user_count, item_count, users, items,
                   _group(users, items, user_count), _group(items[order], users[order], item_count))

    @property
    def interaction_count(self) -> int:
        return int(self.users.size)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.user_count)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.item_count)


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    """Directed triplets over the shared item/entity space, closed under inversion."""

    item_count: int
    entity_count: int
    relation_count: int
    heads: np.ndarray  # sorted by (head, relation, tail)
    relations: np.ndarray
    tails: np.ndarray

    @classmethod
    def from_triplets(cls, item_count: int, entity_count: int, relation_count: int,
                      triplets: Iterable[tuple[int, int, int]], add_inverses: bool = True) -> "KnowledgeGraph":
        """Build a KG; with ``add_inverses`` every ``(h, r, t)`` also yields ``(t, r^1, h)``."""
        if relation_count % 2:
            raise GraphError(f"relation count must be even (forward/inverse pairs), got {relation_count}")
        if entity_count < item_count:
            raise GraphError(f"entity space ({entity_count}) smaller than item range ({item_count})")
        arr = np.array(list(triplets), dtype=np.int64).reshape(-1, 3)
        if arr.size:
            for col, bound, what in ((0, entity_count, "head"), (2, entity_count, "tail"),
                                     (1, relation_count, "relation")):
                bad = (arr[:, col] < 0) | (arr[:, col] >= bound)
                if bad.any():
                    raise GraphError(f"{what} index {arr[bad, col][0]} outside [0, {bound})")
            if add_inverses:
                inv = np.stack([arr[:, 2], arr[:, 1] ^ 1, arr[:, 0]], axis=1)
                arr = np.concatenate([arr, inv])
            arr = np.unique(arr, axis=0)
        kg = cls(item_count, entity_count, relation_count, arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy())
        if not add_inverses and not kg.is_inverse_closed():
            raise GraphError("triplets are not closed under relation inversion")
        return kg

    @property
    def triplet_count(self) -> int:
        return int(self.heads.size)

    def triplets(self) -> list[Triplet]:
        return [Triplet(int(h), int(r), int(t)) for h, r, t in zip(self.heads, self.relations, self.tails)]

    def head_adjacency(self, head: int) -> list[tuple[int, int]]:
        lo, hi = np.searchsorted(self.heads, [head, head + 1])
        return [(int(r), int(t)) for r, t in zip(self.relations[lo:hi], self.tails[lo:hi])]

    def is_inverse_closed(self) -> bool:
        fwd = set(zip(self.heads.tolist(), self.relations.tolist(), self.tails.tolist()))
        return all((t, r ^ 1, h) in fwd for h, r, t in fwd)

    def node_ref(self, index: int) -> NodeRef:
        return NodeRef(Kind.ITEM if index < self.item_count else Kind.ENTITY, int(index))


@dataclass(frozen=True, eq=False)
class UnifiedGraph:
    """Bipartite graph and KG merged over ``U + I + (E minus I)``."""

    bipartite: BipartiteGraph
    kg: KnowledgeGraph

    @property
    def interaction_relation(self) -> int:
        return self.kg.relation_count

    @property
    def user_count(self) -> int:
        return self.bipartite.user_count

    @property
    def item_count(self) -> int:
        return self.bipartite.item_count

    @property
    def entity_count(self) -> int:
        return self.kg.entity_count

    @property
    def node_count(self) -> int:
        """Users plus the shared item/entity space."""
        return self.user_count + self.entity_count

    def global_id(self, n: NodeRef) -> int:
        self.validate(n)
        return n.index if n.kind is Kind.USER else self.user_count + n.index

    def node_at(self, gid: int) -> NodeRef:
        if gid < self.user_count:
            return NodeRef(Kind.USER, int(gid))
        return self.kg.node_ref(gid - self.user_count)

    def validate(self, n: NodeRef) -> None:
        if not isinstance(n, NodeRef) or not isinstance(n.kind, Kind):
            raise GraphError(f"not a node reference: {n!r}")
        if n.kind is Kind.USER:
            ok = 0 <= n.index < self.user_count
        elif n.kind is Kind.ITEM:
            ok = 0 <= n.index < self.item_count
        else:
            ok = self.item_count <= n.index < self.entity_count
        if not ok:
            raise GraphError(f"node {n} does not exist in this graph")

    def nodes(self, kind: Kind) -> list[NodeRef]:
        if kind is Kind.USER:
            rng = range(self.user_count)
        elif kind is Kind.ITEM:
            rng = range(self.item_count)
        else:
            rng = range(self.item_count, self.entity_count)
        return [NodeRef(kind, i) for i in rng]

    def typed_neighbors(self, n: NodeRef) -> list[tuple[int, NodeRef]]:
        """Out-edges of ``n``: interaction edges first (by user/item), then KG edges by (relation, tail)."""
        self.validate(n)
        r_ui = self.interaction_relation
        if n.kind is Kind.USER:
            return [(r_ui, NodeRef(Kind.ITEM, int(i))) for i in self.bipartite.user_adjacency[n.index]]
        out = []
        if n.kind is Kind.ITEM:
            out = [(r_ui, NodeRef(Kind.USER, int(u))) for u in self.bipartite.item_adjacency[n.index]]
        out.extend((r, self.kg.node_ref(t)) for r, t in self.kg.head_adjacency(n.index))
        return out

    def adjacency_matrix(self) -> sparse.csr_matrix:
        """Symmetric 0/1 adjacency over global ids (multi-edges collapsed)."""
        U, N = self.user_count, self.node_count
        b, kg = self.bipartite, self.kg
        rows = np.concatenate([b.users, b.items + U, kg.heads + U])
        cols = np.concatenate([b.items + U, b.users, kg.tails + U])
        a = sparse.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(N, N))
        a.data[:] = 1.0
        return a


def build_unified(bipartite: BipartiteGraph, kg: KnowledgeGraph) -> UnifiedGraph:
    outside = bipartite.items[bipartite.items >= kg.item_count]
    if outside.size:
        raise GraphError(f"item index {int(outside.min())} outside the KG item range [0, {kg.item_count})")
    if bipartite.item_count != kg.item_count:
        raise GraphError(f"bipartite graph has {bipartite.item_count} items but the KG reserves {kg.item_count}")
    return UnifiedGraph(bipartite, kg)


def hop_neighbor_stats(g: UnifiedGraph, max_hop: int, mode: str = "distinct") -> list[float]:
    """Average per-user neighbor counts at hops ``1..max_hop``.

    ``mode="distinct"`` counts nodes at shortest-path distance exactly ``k``;
    ``mode="walks"`` counts endpoints of all length-``k`` walks (with multiplicity).
    """
    if max_hop < 1:
        raise ValueError("max_hop must be >= 1")
    U = g.user_count
    if U == 0:
        return [0.0] * max_hop
    adj = g.adjacency_matrix()
    if mode == "walks":
        out, vec = [], sparse.identity(g.node_count, format="csr")[:U]
        for _ in range(max_hop):
            vec = vec @ adj
            out.append(float(vec.sum()) / U)
        return out
    if mode != "distinct":
        raise ValueError(f"unknown counting mode {mode!r}")
    indptr, indices = adj.indptr, adj.indices
    counts = np.zeros(max_hop)
    for u in range(U):
        dist = {u: 0}
        q = deque([u])
        while q:
            x = q.popleft()
            d = dist[x]
            if d == max_hop:
                continue
            for y in indices[indptr[x]:indptr[x + 1]]:
                if y not in dist:
                    dist[y] = d + 1
                    counts[d] += 1
                    q.append(y)
    return (counts / U).tolist()
