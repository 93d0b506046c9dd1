"""Forward computation of the hierarchical encoder and its recursive baseline.

All functions build onto the tape of their tensor arguments, so a training
step is ``forward -> loss -> autodiff.backward``.  Node rows follow the
conventions of :mod:`hicon.graph`: user tables have ``user_count`` rows, the
entity table covers the shared item/entity space, and the high-order stage
works on global ids (users, then entities).
"""
from __future__ import annotations

import io
import weakref
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Tensor
from .graph import BipartiteGraph, KnowledgeGraph, UnifiedGraph
from .metapath import MetaPath, MetaPathSubgraph, parse_metapath

USER_PATHS = ("UIUIU", "UIEIU")
ITEM_PATHS = ("IUIEI", "IEIUI", "IUIUI")
PREDICT_MODES = ("full", "low_only", "high_only")
CHECKPOINT_HEADER = "# hicon-checkpoint v1"


def _rows(name: str, t: Tensor, n: int, d: int | None = None) -> None:
    if t.value.ndim != 2 or t.shape[0] != n or (d is not None and t.shape[1] != d):
        want = f"({n}, {d if d is not None else '*'})"
        raise ContractError(f"{name}: expected shape {want}, got {t.shape}")


# -- cached graph coefficients -----------------------------------------------

_bip_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()
_sub_cache: "weakref.WeakKeyDictionary" = weakref.WeakKeyDictionary()


def _sym_norm(deg_a: np.ndarray, deg_b: np.ndarray) -> np.ndarray:
    return 1.0 / np.sqrt(deg_a.astype(np.float64) * deg_b.astype(np.float64))


def _bipartite_coef(b: BipartiteGraph) -> np.ndarray:
    coef = _bip_cache.get(b)
    if coef is None:
        coef = _sym_norm(b.user_degrees()[b.users], b.item_degrees()[b.items])
        _bip_cache[b] = coef
    return coef


def _subgraph_arrays(sub: MetaPathSubgraph):
    hit = _sub_cache.get(sub)
    if hit is None:
        src, dst = sub.directed_edges()
        deg = sub.degrees
        hit = (src, dst, _sym_norm(deg[src], deg[dst]))
        _sub_cache[sub] = hit
    return hit


# -- low-order aggregation ---------------------------------------------------

def light_propagate(bipartite: BipartiteGraph, user_emb: Tensor, item_emb: Tensor) -> tuple[Tensor, Tensor]:
    """Symmetric-normalized neighbor sums across the bipartite graph.

    Returns ``(item_side, user_side)``: per item the messages from its users and
    per user the messages from its items.  Degree-0 nodes receive zeros.
    """
    d = user_emb.shape[1] if user_emb.value.ndim == 2 else None
    _rows("user_emb", user_emb, bipartite.user_count)
    _rows("item_emb", item_emb, bipartite.item_count, d)
    coef = _bipartite_coef(bipartite)
    to_items = ad.gather_segment_sum(user_emb, bipartite.users, bipartite.items, bipartite.item_count, coef)
    to_users = ad.gather_segment_sum(item_emb, bipartite.items, bipartite.users, bipartite.user_count, coef)
    return to_items, to_users


def relation_attention(kg: KnowledgeGraph, entity_emb: Tensor, relation_emb: Tensor,
                       items_only: bool = False) -> Tensor:
    """Relation-aware attention over each head's triplets, one row per entity-space node.

    For head ``h``: ``sum_t beta_ht (e_r * e_t)`` with ``beta`` the softmax over
    the head's triplets of ``s_h . s_t``, ``s_x = normalize(e_x * e_r)``.
    With ``items_only`` only item heads aggregate; other rows are zero.
    """
    _rows("entity_emb", entity_emb, kg.entity_count)
    _rows("relation_emb", relation_emb, kg.relation_count, entity_emb.shape[1])
    heads, rels, tails = kg.heads, kg.relations, kg.tails
    if items_only:
        keep = heads < kg.item_count
        heads, rels, tails = heads[keep], rels[keep], tails[keep]
    return _attend(entity_emb, relation_emb, heads, rels, tails, kg.entity_count)[0]


def _attend(entity_emb, relation_emb, heads, rels, tails, n):
    e_r = ad.row_gather(relation_emb, rels)
    e_t = ad.row_gather(entity_emb, tails)
    e_h = ad.row_gather(entity_emb, heads)
    rt = ad.mul(e_r, e_t)
    pi = ad.dot_rows(ad.l2_normalize_rows(ad.mul(e_h, e_r)), ad.l2_normalize_rows(rt))
    beta = ad.segment_softmax(pi, heads, n)
    return ad.segment_sum(ad.mul_rows(rt, beta), heads, n), beta


def attention_weights(kg: KnowledgeGraph, entity_emb: Tensor, relation_emb: Tensor) -> np.ndarray:
    """Attention weights aligned with ``kg.heads`` (diagnostics)."""
    return _attend(entity_emb, relation_emb, kg.heads, kg.relations, kg.tails, kg.entity_count)[1].value


@dataclass
class LayerState:
    user: Tensor  # (U, d)
    entity: Tensor  # (E, d), items in the low rows
    item_side: Tensor | None = None  # h: user messages per item, padded to E rows
    kg_side: Tensor | None = None  # g: KG messages per entity-space node


def dual_layer(g: UnifiedGraph, state: LayerState, relation_emb: Tensor) -> LayerState:
    """One dual propagation layer.

    Items: ``h + g`` (sum pooling).  Users: bipartite side only.  Pure
    entities: KG side only, with entities as attention heads.
    """
    I, E = g.item_count, g.entity_count
    item_rows = ad.slice_rows(state.entity, 0, I)
    h_items, h_users = light_propagate(g.bipartite, state.user, item_rows)
    zeros = state.entity.tape.constant(np.zeros((E - I, h_items.shape[1])))
    h_pad = ad.concat([h_items, zeros], axis=0)
    kg_msg = relation_attention(g.kg, state.entity, relation_emb)
    return LayerState(h_users, ad.add(h_pad, kg_msg), h_pad, kg_msg)


@dataclass
class LowOrderOutput:
    user: Tensor  # e_u
    entity: Tensor  # layer-sum over the full entity space
    item: Tensor  # e_v: item rows of ``entity``
    layers: list[LayerState] = field(default_factory=list)


def _stacked(g: UnifiedGraph, user0: Tensor, entity0: Tensor, relation_emb: Tensor, depth: int) -> LowOrderOutput:
    if depth < 1:
        raise ValueError("depth must be >= 1")
    _rows("user_emb", user0, g.user_count)
    _rows("entity_emb", entity0, g.entity_count, user0.shape[1])
    state = LayerState(user0, entity0)
    layers = [state]
    u_sum, e_sum = user0, entity0
    for _ in range(depth):
        state = dual_layer(g, state, relation_emb)
        layers.append(state)
        u_sum, e_sum = ad.add(u_sum, state.user), ad.add(e_sum, state.entity)
    return LowOrderOutput(u_sum, e_sum, ad.slice_rows(e_sum, 0, g.item_count), layers)


def low_order_encode(g: UnifiedGraph, user0: Tensor, entity0: Tensor, relation_emb: Tensor) -> LowOrderOutput:
    """Two stacked dual layers with layer-sum readout ``e0 + e1 + e2``."""
    return _stacked(g, user0, entity0, relation_emb, 2)


def recursive_encode(g: UnifiedGraph, user0: Tensor, entity0: Tensor, relation_emb: Tensor,
                     depth: int) -> LowOrderOutput:
    """Recursive-propagation baseline: ``depth`` dual layers, layer-sum readout."""
    return _stacked(g, user0, entity0, relation_emb, depth)


# -- high-order aggregation ---------------------------------------------------

def gcn_layer(sub: MetaPathSubgraph, z: Tensor, weight: Tensor, slope: float = ad.LEAKY_SLOPE) -> Tensor:
    _rows("z", z, sub.node_count)
    d = z.shape[1]
    _rows("weight", weight, d, d)
    src, dst, coef = _subgraph_arrays(sub)
    agg = ad.gather_segment_sum(z, src, dst, sub.node_count, coef)
    return ad.leaky_relu(ad.matmul(agg, weight), slope)


@dataclass
class HighOrderOutput:
    user: Tensor  # z_u
    item: Tensor  # z_v
    per_path: dict[str, Tensor] = field(default_factory=dict)  # full-node outputs per meta-path


def encode_metapath(sub: MetaPathSubgraph, z0: Tensor, weights: Sequence[Tensor]) -> Tensor:
    """Run one GCN per meta-path hop and keep only the last layer."""
    if len(weights) != sub.metapath.length:
        raise ContractError(f"{sub.metapath}: expected {sub.metapath.length} GCN weights, got {len(weights)}")
    z = z0
    for w in weights:
        z = gcn_layer(sub, z, w)
    return z


def high_order_encode(subgraphs: Mapping[str, MetaPathSubgraph], z0: Tensor,
                      weights: Mapping[str, Sequence[Tensor]], user_paths: Sequence[str],
                      item_paths: Sequence[str], user_count: int, item_count: int,
                      pooling: str = "mean") -> HighOrderOutput:
    if not user_paths or not item_paths:
        raise ValueError("high-order aggregation needs at least one user and one item meta-path")
    if pooling not in ("mean", "sum"):
        raise ValueError(f"unknown pooling {pooling!r}")
    per_path = {name: encode_metapath(subgraphs[name], z0, weights[name])
                for name in (*user_paths, *item_paths)}

    def pool(names, start, stop):
        outs = [ad.slice_rows(per_path[n], start, stop) for n in names]
        if pooling == "mean":
            return ad.mean_of(outs)
        acc = outs[0]
        for o in outs[1:]:
            acc = ad.add(acc, o)
        return acc

    return HighOrderOutput(pool(user_paths, 0, user_count),
                           pool(item_paths, user_count, user_count + item_count), per_path)


# -- prediction ----------------------------------------------------------------

def predict(e_u: Tensor, z_u: Tensor | None, e_i: Tensor, z_i: Tensor | None, mode: str = "full") -> Tensor:
    """Row-wise ``[e_u || z_u] . [e_i || z_i]`` or one of its two halves."""
    if mode not in PREDICT_MODES:
        raise ValueError(f"unknown prediction mode {mode!r}")
    if mode != "high_only" and e_u.shape != e_i.shape:
        raise ContractError(f"predict: shape mismatch {e_u.shape} vs {e_i.shape}")
    if mode == "low_only":
        return ad.dot_rows(e_u, e_i)
    if z_u is None or z_i is None:
        raise ContractError(f"predict: mode {mode!r} needs high-level representations")
    if z_u.shape != z_i.shape:
        raise ContractError(f"predict: shape mismatch {z_u.shape} vs {z_i.shape}")
    high = ad.dot_rows(z_u, z_i)
    return high if mode == "high_only" else ad.add(ad.dot_rows(e_u, e_i), high)


# -- parameters ----------------------------------------------------------------

def xavier_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    user: np.ndarray
    entity: np.ndarray
    relation: np.ndarray
    gcn: dict[str, list[np.ndarray]] = field(default_factory=dict)

    @classmethod
    def init(cls, g: UnifiedGraph, dim: int, metapaths: Sequence[str], rng: np.random.Generator) -> "ModelParams":
        user = xavier_uniform(rng, (g.user_count, dim))
        entity = xavier_uniform(rng, (g.entity_count, dim))
        relation = xavier_uniform(rng, (g.kg.relation_count, dim))
        gcn = {name: [xavier_uniform(rng, (dim, dim)) for _ in range(parse_metapath(name).length)]
               for name in metapaths}
        return cls(user, entity, relation, gcn)

    @property
    def dim(self) -> int:
        return self.user.shape[1]

    def named(self) -> dict[str, np.ndarray]:
        out = {"user": self.user, "entity": self.entity, "relation": self.relation}
        for name, ws in self.gcn.items():
            for k, w in enumerate(ws):
                out[f"gcn/{name}/{k}"] = w
        return out

    @classmethod
    def from_named(cls, named: Mapping[str, np.ndarray]) -> "ModelParams":
        gcn: dict[str, list[np.ndarray]] = {}
        for key, arr in named.items():
            if key.startswith("gcn/"):
                _, name, k = key.split("/")
                gcn.setdefault(name, []).append((int(k), np.asarray(arr, dtype=np.float64)))
        return cls(np.asarray(named["user"], dtype=np.float64), np.asarray(named["entity"], dtype=np.float64),
                   np.asarray(named["relation"], dtype=np.float64),
                   {n: [w for _, w in sorted(ws, key=lambda p: p[0])] for n, ws in gcn.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_named({k: v.copy() for k, v in self.named().items()})

    def size(self) -> int:
        return int(sum(v.size for v in self.named().values()))

    def leaves(self, tape: Tape, trainable: bool = True) -> dict[str, Tensor]:
        make = tape.leaf if trainable else tape.constant
        return {k: make(v, k) for k, v in self.named().items()}


def save_checkpoint(params: ModelParams, path) -> None:
    """Text dump: header line, then per parameter a ``param<TAB>name<TAB>rows<TAB>cols``
    line followed by one tab-separated row per line (shortest round-trip floats)."""
    buf = io.StringIO()
    buf.write(CHECKPOINT_HEADER + "\n")
    for name, arr in params.named().items():
        rows, cols = arr.shape
        buf.write(f"param\t{name}\t{rows}\t{cols}\n")
        for row in arr.tolist():
            buf.write("\t".join(repr(x) for x in row) + "\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a checkpoint (bad header)")
    named, i = {}, 1
    while i < len(lines) and lines[i]:
        tag, name, rows, cols = lines[i].split("\t")
        if tag != "param":
            raise ValueError(f"{path}:{i + 1}: expected a param line")
        rows, cols = int(rows), int(cols)
        body = lines[i + 1:i + 1 + rows]
        named[name] = np.array([[float(x) for x in r.split("\t")] for r in body],
                               dtype=np.float64).reshape(rows, cols)
        i += 1 + rows
    return ModelParams.from_named(named)


# -- the assembled model -------------------------------------------------------

@dataclass
class ModelConfig:
    dim: int = 64
    user_paths: tuple[str, ...] = USER_PATHS
    item_paths: tuple[str, ...] = ITEM_PATHS
    pooling: str = "mean"
    disable_low: bool = False
    disable_high: bool = False
    recursive_depth: int | None = None

    @property
    def metapaths(self) -> tuple[str, ...]:
        if self.disable_high or self.recursive_depth:
            return ()
        return (*self.user_paths, *self.item_paths)


@dataclass
class Representations:
    user_low: Tensor
    item_low: Tensor
    user_high: Tensor | None
    item_high: Tensor | None

    def score(self, users, items, mode: str = "full") -> Tensor:
        if self.user_high is None and mode == "full":
            mode = "low_only"
        z_u = None if self.user_high is None else ad.row_gather(self.user_high, users)
        z_i = None if self.item_high is None else ad.row_gather(self.item_high, items)
        return predict(ad.row_gather(self.user_low, users), z_u, ad.row_gather(self.item_low, items), z_i, mode)

    def user_final(self) -> np.ndarray:
        """Concatenated user representation used for scoring."""
        parts = [self.user_low.value] + ([] if self.user_high is None else [self.user_high.value])
        return np.concatenate(parts, axis=1)

    def item_final(self) -> np.ndarray:
        parts = [self.item_low.value] + ([] if self.item_high is None else [self.item_high.value])
        return np.concatenate(parts, axis=1)


class HiCON:
    """Graph, prebuilt meta-path subgraphs and configuration; parameters are passed per call."""

    def __init__(self, graph: UnifiedGraph, config: ModelConfig,
                 subgraphs: Mapping[str, MetaPathSubgraph] | None = None):
        if config.disable_low and config.disable_high:
            raise ValueError("at least one of the low- and high-order encoders must be active")
        self.graph = graph
        self.config = config
        if subgraphs is None:
            from .metapath import build_subgraph
            subgraphs = {n: build_subgraph(graph, parse_metapath(n)) for n in config.metapaths}
        missing = [n for n in config.metapaths if n not in subgraphs]
        if missing:
            raise ValueError(f"missing subgraphs for meta-paths {missing}")
        self.subgraphs = dict(subgraphs)

    def init_params(self, rng: np.random.Generator) -> ModelParams:
        return ModelParams.init(self.graph, self.config.dim, self.config.metapaths, rng)

    def forward(self, leaves: Mapping[str, Tensor]) -> Representations:
        g, cfg = self.graph, self.config
        user0, entity0, rel = leaves["user"], leaves["entity"], leaves["relation"]
        if cfg.recursive_depth:
            low = recursive_encode(g, user0, entity0, rel, cfg.recursive_depth)
            return Representations(low.user, low.item, None, None)
        if cfg.disable_low:
            user_low, entity_low = user0, entity0
        else:
            low = low_order_encode(g, user0, entity0, rel)
            user_low, entity_low = low.user, low.entity
        item_low = ad.slice_rows(entity_low, 0, g.item_count)
        if cfg.disable_high:
            return Representations(user_low, item_low, None, None)
        weights = {n: [leaves[f"gcn/{n}/{k}"] for k in range(self.subgraphs[n].metapath.length)]
                   for n in cfg.metapaths}
        z0 = ad.concat([user_low, entity_low], axis=0)
        high = high_order_encode(self.subgraphs, z0, weights, cfg.user_paths, cfg.item_paths,
                                 g.user_count, g.item_count, cfg.pooling)
        return Representations(user_low, item_low, high.user, high.item)

    def represent(self, params: ModelParams) -> Representations:
        tape = Tape()
        return self.forward(params.leaves(tape, trainable=False))

    def score_pairs(self, params: ModelParams, users, items, mode: str = "full") -> np.ndarray:
        reps = self.represent(params)
        return reps.score(np.asarray(users), np.asarray(items), mode).value
