"""Meta-path schemas, path-instance enumeration and meta-path-guided subgraphs.

A walk may revisit nodes but may not immediately re-traverse the edge it just
used (``a -> b -> a``).  Subgraph edges are undirected and untyped and are
addressed by *global ids* (users first, then the shared item/entity space; see
``UnifiedGraph.global_id``).
"""
from __future__ import annotations

import weakref
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .graph import Kind, NodeRef, UnifiedGraph

DEFAULT_BUDGET = 10**7

# kind pairs joined by at least one edge category in the unified graph
ADMISSIBLE = {
    (Kind.USER, Kind.ITEM), (Kind.ITEM, Kind.USER),
    (Kind.ITEM, Kind.ENTITY), (Kind.ENTITY, Kind.ITEM),
    (Kind.ITEM, Kind.ITEM), (Kind.ENTITY, Kind.ENTITY),
}


class MetaPathError(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    """Instance enumeration went past its configured budget."""


@dataclass(frozen=True)
class MetaPath:
    name: str
    kinds: tuple[Kind, ...]

    @property
    def length(self) -> int:
        """Number of hops (edges) in the schema."""
        return len(self.kinds) - 1

    @property
    def anchor(self) -> Kind:
        return self.kinds[0]

    def __str__(self) -> str:
        return self.name


def parse_metapath(schema: str) -> MetaPath:
    """Parse a schema string like ``"UIEIU"``; errors report 1-based positions."""
    if not schema:
        raise MetaPathError("empty meta-path")
    kinds = []
    for pos, ch in enumerate(schema, start=1):
        try:
            kinds.append(Kind(ch))
        except ValueError:
            raise MetaPathError(f"unknown node kind {ch!r} at position {pos} in {schema!r}") from None
    if len(kinds) < 2:
        raise MetaPathError(f"meta-path {schema!r} needs at least 2 node kinds")
    for pos in range(1, len(kinds)):
        if (kinds[pos - 1], kinds[pos]) not in ADMISSIBLE:
            raise MetaPathError(f"no edge category joins {schema[pos - 1]} and {schema[pos]} "
                                f"at position {pos + 1} in {schema!r}")
    return MetaPath(schema, tuple(kinds))


class PathInstance(NamedTuple):
    nodes: tuple[NodeRef, ...]

    def __str__(self) -> str:
        return "-".join(str(n) for n in self.nodes)


TypedAdjacency = dict[tuple[Kind, Kind], dict[int, tuple[int, ...]]]
_adjacency_cache: "weakref.WeakKeyDictionary[UnifiedGraph, TypedAdjacency]" = weakref.WeakKeyDictionary()


def typed_adjacency(g: UnifiedGraph) -> TypedAdjacency:
    """Neighbor tuples (global ids, ascending) keyed by ``(from_kind, to_kind)``."""
    cached = _adjacency_cache.get(g)
    if cached is not None:
        return cached
    U = g.user_count
    buckets: dict[tuple[Kind, Kind], dict[int, set[int]]] = defaultdict(lambda: defaultdict(set))
    for u, i in zip(g.bipartite.users.tolist(), g.bipartite.items.tolist()):
        buckets[(Kind.USER, Kind.ITEM)][u].add(U + i)
        buckets[(Kind.ITEM, Kind.USER)][U + i].add(u)
    kg = g.kg
    for h, t in zip(kg.heads.tolist(), kg.tails.tolist()):
        pair = (kg.node_ref(h).kind, kg.node_ref(t).kind)
        buckets[pair][U + h].add(U + t)
    adj = {pair: {n: tuple(sorted(s)) for n, s in sorted(d.items())} for pair, d in buckets.items()}
    _adjacency_cache[g] = adj
    return adj


def _check_anchor(g: UnifiedGraph, m: MetaPath, anchor: NodeRef) -> int:
    if anchor.kind is not m.anchor:
        raise MetaPathError(f"anchor {anchor} has kind {anchor.kind.value}, meta-path {m} starts with {m.anchor.value}")
    return g.global_id(anchor)


def iter_instances(g: UnifiedGraph, m: MetaPath, anchor: NodeRef,
                   budget: int = DEFAULT_BUDGET) -> Iterator[PathInstance]:
    """Lazily yield instances from ``anchor`` in lexicographic (global id) order."""
    start = _check_anchor(g, m, anchor)
    adj = typed_adjacency(g)
    steps = [adj.get((m.kinds[k], m.kinds[k + 1]), {}) for k in range(m.length)]
    produced = 0
    path = [start]

    def walk(depth: int):
        nonlocal produced
        if depth == m.length:
            produced += 1
            if produced > budget:
                raise BudgetExceeded(f"meta-path {m} exceeded the instance budget of {budget}")
            yield PathInstance(tuple(g.node_at(x) for x in path))
            return
        here = path[-1]
        back = path[-2] if depth > 0 else None
        for nxt in steps[depth].get(here, ()):
            if nxt == back:
                continue
            path.append(nxt)
            yield from walk(depth + 1)
            path.pop()

    yield from walk(0)


def enumerate_instances(g: UnifiedGraph, m: MetaPath, anchor: NodeRef,
                        budget: int = DEFAULT_BUDGET) -> list[PathInstance]:
    return list(iter_instances(g, m, anchor, budget))


@dataclass(frozen=True, eq=False)
class MetaPathSubgraph:
    metapath: MetaPath
    node_count: int
    edges: np.ndarray  # (n, 2) global-id pairs with a <= b, sorted
    neighbor_lists: tuple[np.ndarray, ...] = field(repr=False)
    instance_count: int | None = None

    @classmethod
    def from_edges(cls, m: MetaPath, node_count: int, pairs, instance_count=None) -> "MetaPathSubgraph":
        arr = np.array(sorted({(min(a, b), max(a, b)) for a, b in pairs}), dtype=np.int64).reshape(-1, 2)
        nbrs: list[set[int]] = [set() for _ in range(node_count)]
        for a, b in arr.tolist():
            nbrs[a].add(b)
            nbrs[b].add(a)
        lists = tuple(np.array(sorted(s), dtype=np.int64) for s in nbrs)
        return cls(m, node_count, arr, lists, instance_count)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(x) for x in self.neighbor_lists], dtype=np.int64)

    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """``(src, dst)`` with every undirected edge in both directions (self-loops once)."""
        a, b = self.edges[:, 0], self.edges[:, 1]
        loop = a == b
        src = np.concatenate([a, b[~loop]])
        dst = np.concatenate([b, a[~loop]])
        return src, dst

    def edge_refs(self, g: UnifiedGraph) -> list[tuple[NodeRef, NodeRef]]:
        return [(g.node_at(a), g.node_at(b)) for a, b in self.edges.tolist()]


def _edge_state_dp(g: UnifiedGraph, m: MetaPath, starts: Sequence[int]):
    """Per hop ``k``: counts of valid prefixes ending in, and suffixes starting at, each directed edge."""
    adj = typed_adjacency(g)
    steps = [adj.get((m.kinds[k], m.kinds[k + 1]), {}) for k in range(m.length)]
    L = m.length
    fwd: list[dict[tuple[int, int], int]] = [{} for _ in range(L)]
    fwd[0] = {(a, b): 1 for a in starts for b in steps[0].get(a, ())}
    for k in range(1, L):
        into: dict[int, int] = defaultdict(int)
        for (_, b), c in fwd[k - 1].items():
            into[b] += c
        nxt = {}
        for b, s in into.items():
            for c in steps[k].get(b, ()):
                n = s - fwd[k - 1].get((c, b), 0)
                if n > 0:
                    nxt[(b, c)] = n
        fwd[k] = nxt
    bwd: list[dict[tuple[int, int], int]] = [{} for _ in range(L)]
    bwd[L - 1] = {(a, b): 1 for a, nb in steps[L - 1].items() for b in nb}
    for k in range(L - 2, -1, -1):
        out: dict[int, int] = defaultdict(int)
        for (b, _), c in bwd[k + 1].items():
            out[b] += c
        cur = {}
        for a, nb in steps[k].items():
            for b in nb:
                n = out.get(b, 0) - bwd[k + 1].get((b, a), 0)
                if n > 0:
                    cur[(a, b)] = n
        bwd[k] = cur
    return fwd, bwd


def count_instances(g: UnifiedGraph, m: MetaPath, anchors: Sequence[NodeRef] | None = None) -> int:
    anchors = g.nodes(m.anchor) if anchors is None else anchors
    fwd, _ = _edge_state_dp(g, m, [_check_anchor(g, m, a) for a in anchors])
    return int(sum(fwd[-1].values()))


def build_subgraph(g: UnifiedGraph, m: MetaPath, anchors: Sequence[NodeRef] | None = None,
                   method: str = "dp", budget: int = DEFAULT_BUDGET) -> MetaPathSubgraph:
    """Union of all instance edges from ``anchors`` (default: every node of the anchor kind).

    ``method="dp"`` keeps an edge iff some valid prefix reaches it and some valid
    suffix leaves it, which is exact without listing instances;
    ``method="enumerate"`` unions explicitly enumerated instances under ``budget``.
    """
    anchors = g.nodes(m.anchor) if anchors is None else list(anchors)
    if method == "enumerate":
        pairs, count = set(), 0
        for a in anchors:
            for inst in iter_instances(g, m, a, budget - count):
                count += 1
                ids = [g.global_id(n) for n in inst.nodes]
                pairs.update(zip(ids[:-1], ids[1:]))
        return MetaPathSubgraph.from_edges(m, g.node_count, pairs, count)
    if method != "dp":
        raise ValueError(f"unknown subgraph method {method!r}")
    fwd, bwd = _edge_state_dp(g, m, [_check_anchor(g, m, a) for a in anchors])
    pairs = set()
    for f, b in zip(fwd, bwd):
        pairs.update(e for e in f if e in b)
    return MetaPathSubgraph.from_edges(m, g.node_count, pairs, int(sum(fwd[-1].values())))
