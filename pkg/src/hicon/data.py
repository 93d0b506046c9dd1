"""Rating and triplet ingestion, CTR negative filling, splits and synthetic data.

On-disk formats (UTF-8, LF, tab-separated, no header):

* ``ratings.tsv``  ``user  item  rating``
* ``triplets.tsv`` ``head  relation  tail``
* ``splits.tsv``   ``user  item  label  {train|val|test}``
* ``nodes.tsv``    ``kind  external_id`` in ordinal order (kinds ``U``, ``I``, ``E``, ``R``);
  written next to generated data so ordinals survive a round trip.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .graph import BipartiteGraph, KnowledgeGraph, UnifiedGraph, build_unified
from .rng import substream

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.6, 0.2, 0.2)


class DataFormatError(ValueError):
    """Malformed input line; the message carries ``path:line``."""


class Interaction(NamedTuple):
    user: int
    item: int
    label: int


class IdMap:
    """Bijection between external string ids and dense ordinals (first-seen order)."""

    def __init__(self, ids: Iterable[str] = ()):
        self.ids: list[str] = []
        self.index: dict[str, int] = {}
        for x in ids:
            self.add(x)

    def add(self, ext: str) -> int:
        k = self.index.get(ext)
        if k is None:
            k = self.index[ext] = len(self.ids)
            self.ids.append(ext)
        return k

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, ext: str) -> int:
        return self.index[ext]

    def __contains__(self, ext: str) -> bool:
        return ext in self.index

    def external(self, k: int) -> str:
        return self.ids[k]


def _read_rows(path, width: int) -> Iterable[tuple[int, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != width or any(p == "" for p in parts):
                raise DataFormatError(f"{path}:{lineno}: expected {width} tab-separated fields, got {line!r}")
            yield lineno, parts


@dataclass
class Ratings:
    positives: list[Interaction]
    user_pos: dict[int, set[int]]
    users: IdMap
    items: IdMap
    omitted: int = 0


def load_ratings(path, threshold: float) -> Ratings:
    """Pairs rated ``>= threshold`` become positives; lower-rated pairs are dropped entirely.

    Duplicate pairs keep their maximum rating.  Ids are densified over retained
    pairs in order of first appearance.
    """
    if threshold < 0:
        raise ValueError("rating threshold must be >= 0")
    best: dict[tuple[str, str], float] = {}
    for lineno, (u, i, r) in _read_rows(path, 3):
        try:
            rating = float(r)
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: rating {r!r} is not a number") from None
        if (u, i) in best:
            log.warning("%s:%d: duplicate pair (%s, %s); keeping the maximum rating", path, lineno, u, i)
            rating = max(rating, best[(u, i)])
        best[(u, i)] = rating
    users, items = IdMap(), IdMap()
    positives, user_pos, omitted = [], {}, 0
    for (u, i), rating in best.items():
        if rating < threshold:
            omitted += 1
            continue
        uk, ik = users.add(u), items.add(i)
        positives.append(Interaction(uk, ik, 1))
        user_pos.setdefault(uk, set()).add(ik)
    return Ratings(positives, user_pos, users, items, omitted)


def negative_fill(user_pos: Mapping[int, Iterable[int]], catalog_size: int,
                  rng: np.random.Generator) -> list[Interaction]:
    """Add, per user, as many label-0 items as positives, uniform without replacement."""
    out = []
    for u in sorted(user_pos):
        pos = np.array(sorted(set(user_pos[u])), dtype=np.int64)
        free = np.setdiff1d(np.arange(catalog_size), pos)
        if free.size == 0 or free.size < pos.size:
            raise ValueError(f"user {u}: {pos.size} positives leave only {free.size} unobserved items "
                             f"in a catalog of {catalog_size}")
        neg = np.sort(rng.choice(free, size=pos.size, replace=False))
        out.extend(Interaction(u, int(i), 1) for i in pos)
        out.extend(Interaction(u, int(i), 0) for i in neg)
    return out


@dataclass
class TripletData:
    kg: KnowledgeGraph
    entities: IdMap  # item ids occupy the low ordinals
    relations: IdMap  # forward relation names; ordinal k is stored as 2k


def load_triplets(path, items: IdMap) -> TripletData:
    """Read ``head relation tail`` lines into an inverse-closed KG aligned with ``items``."""
    entities = IdMap(items.ids)
    relations = IdMap()
    raw = []
    for _, (h, r, t) in _read_rows(path, 3):
        raw.append((entities.add(h), 2 * relations.add(r), entities.add(t)))
    kg = KnowledgeGraph.from_triplets(len(items), len(entities), 2 * len(relations), raw)
    return TripletData(kg, entities, relations)


def split_per_user(rows: Sequence[Interaction], rng: np.random.Generator,
                   ratios: Sequence[float] = DEFAULT_RATIOS) -> dict[str, list[Interaction]]:
    """Shuffle each user's positives and negatives separately and cut both by ``ratios``."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise ValueError(f"split ratios must be 3 non-negative numbers summing to 1, got {ratios}")
    by_user: dict[int, dict[int, list[Interaction]]] = {}
    for row in rows:
        by_user.setdefault(row.user, {0: [], 1: []})[row.label].append(row)
    out = {s: [] for s in SPLITS}
    for u in sorted(by_user):
        for label in (1, 0):
            group = sorted(by_user[u][label])
            perm = rng.permutation(len(group))
            n = len(group)
            n_train = int(round(ratios[0] * n))
            n_val = int(round(ratios[1] * n))
            cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
            for s, idx in zip(SPLITS, cuts):
                out[s].extend(group[k] for k in sorted(idx))
    for s in SPLITS:
        out[s].sort()
    return out


@dataclass
class Dataset:
    users: IdMap
    items: IdMap
    entities: IdMap
    relations: IdMap
    kg: KnowledgeGraph
    splits: dict[str, np.ndarray]  # (n, 3) int arrays: user, item, label
    clusters: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def user_count(self) -> int:
        return len(self.users)

    @property
    def item_count(self) -> int:
        return len(self.items)

    def positives(self, split: str) -> np.ndarray:
        s = self.splits[split]
        return s[s[:, 2] == 1, :2]

    def train_bipartite(self) -> BipartiteGraph:
        return BipartiteGraph.from_edges(self.user_count, self.item_count, map(tuple, self.positives("train")))

    def unified(self) -> UnifiedGraph:
        return build_unified(self.train_bipartite(), self.kg)

    def train_positive_sets(self) -> list[np.ndarray]:
        return list(self.train_bipartite().user_adjacency)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for s in SPLITS:
            h.update(s.encode())
            h.update(np.ascontiguousarray(self.splits[s], dtype=np.int64).tobytes())
        for arr in (self.kg.heads, self.kg.relations, self.kg.tails):
            h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
        return h.hexdigest()


def _to_arrays(splits: Mapping[str, Sequence[Interaction]]) -> dict[str, np.ndarray]:
    return {s: np.array(splits[s], dtype=np.int64).reshape(-1, 3) for s in SPLITS}


def from_ratings(ratings_path, triplets_path, threshold: float, seed: int,
                 ratios: Sequence[float] = DEFAULT_RATIOS) -> Dataset:
    """Full preprocessing: threshold, negative fill, per-user split, KG alignment."""
    ratings = load_ratings(ratings_path, threshold)
    trip = load_triplets(triplets_path, ratings.items)
    rng = substream(seed, "splits")
    rows = negative_fill(ratings.user_pos, len(ratings.items), rng)
    splits = split_per_user(rows, rng, ratios)
    return Dataset(ratings.users, ratings.items, trip.entities, trip.relations, trip.kg, _to_arrays(splits))


# -- synthetic data -------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 200
    n_items: int = 300
    n_entities: int = 150  # pure entities, beyond the items
    n_relations: int = 2
    n_clusters: int = 4
    noise: float = 0.1
    min_interactions: int = 10
    max_interactions: int = 40
    popularity: float = 1.0  # Zipf exponent of within-cluster item popularity


def synth_generate(spec: SynthSpec = SynthSpec(), seed: int = 0) -> Dataset:
    """Planted-cluster dataset: users prefer items of their own cluster.

    Each item links to one entity of its own cluster per relation type.  A
    positive is drawn inside the user's cluster with probability ``1 - noise``
    (items weighted by a within-cluster Zipf popularity), otherwise outside it.
    """
    C = spec.n_clusters
    if C < 2:
        raise ValueError("need at least 2 clusters")
    if C > spec.n_items or C > spec.n_users or C > spec.n_entities:
        raise ValueError(f"{C} clusters cannot be populated by {spec.n_users} users, "
                         f"{spec.n_items} items and {spec.n_entities} entities")
    if not 0 <= spec.noise < 0.5:
        raise ValueError("noise rate must lie in [0, 0.5)")
    if spec.n_relations < 1 or not 1 <= spec.min_interactions <= spec.max_interactions:
        raise ValueError("invalid relation or interaction counts")
    rng = substream(seed, "synth")
    user_c = rng.permutation(np.arange(spec.n_users) % C)
    item_c = rng.permutation(np.arange(spec.n_items) % C)
    ent_c = rng.permutation(np.arange(spec.n_entities) % C)

    popularity = np.zeros(spec.n_items)
    for c in range(C):
        members = np.flatnonzero(item_c == c)
        popularity[rng.permutation(members)] = 1.0 / np.arange(1, members.size + 1) ** spec.popularity

    triplets = []
    for r in range(spec.n_relations):
        for i in range(spec.n_items):
            e = rng.choice(np.flatnonzero(ent_c == item_c[i]))
            triplets.append((i, 2 * r, spec.n_items + int(e)))
    kg = KnowledgeGraph.from_triplets(spec.n_items, spec.n_items + spec.n_entities, 2 * spec.n_relations, triplets)

    user_pos: dict[int, set[int]] = {}
    for u in range(spec.n_users):
        inside = item_c == user_c[u]
        p = np.where(inside, (1 - spec.noise) * popularity / popularity[inside].sum(), 0.0)
        if spec.noise > 0:
            p += np.where(inside, 0.0, spec.noise * popularity / popularity[~inside].sum())
        p /= p.sum()
        n = min(int(rng.integers(spec.min_interactions, spec.max_interactions + 1)),
                int(np.count_nonzero(p)), spec.n_items // 2)
        user_pos[u] = set(rng.choice(spec.n_items, size=n, replace=False, p=p).tolist())

    rows = negative_fill(user_pos, spec.n_items, rng)
    splits = split_per_user(rows, rng)
    users = IdMap(f"u{k}" for k in range(spec.n_users))
    items = IdMap(f"i{k}" for k in range(spec.n_items))
    entities = IdMap(items.ids + [f"e{k}" for k in range(spec.n_entities)])
    relations = IdMap(f"r{k}" for k in range(spec.n_relations))
    clusters = {"user": user_c, "item": item_c, "entity": ent_c}
    return Dataset(users, items, entities, relations, kg, _to_arrays(splits), clusters)


# -- dataset directories ---------------------------------------------------------

def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


def save_dataset(ds: Dataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    U, I, E, R = ds.users.external, ds.items.external, ds.entities.external, ds.relations.external
    written = []

    def emit(name, lines):
        _write_lines(out / name, lines)
        written.append(out / name)

    emit("nodes.tsv", [f"U\t{x}" for x in ds.users.ids] + [f"I\t{x}" for x in ds.items.ids]
         + [f"E\t{x}" for x in ds.entities.ids[ds.item_count:]] + [f"R\t{x}" for x in ds.relations.ids])
    emit("ratings.tsv", [f"{U(u)}\t{I(i)}\t1" for s in SPLITS for u, i in ds.positives(s).tolist()])
    fwd = ds.kg.relations % 2 == 0
    emit("triplets.tsv", [f"{E(h)}\t{R(r // 2)}\t{E(t)}" for h, r, t in
                          zip(ds.kg.heads[fwd].tolist(), ds.kg.relations[fwd].tolist(), ds.kg.tails[fwd].tolist())])
    emit("splits.tsv", [f"{U(u)}\t{I(i)}\t{lab}\t{s}" for s in SPLITS for u, i, lab in ds.splits[s].tolist()])
    if ds.clusters:
        emit("clusters.tsv", [f"{kind}\t{k}\t{c}" for kind, arr in ds.clusters.items() for k, c in enumerate(arr.tolist())])
    return written


def load_dataset(data_dir, threshold: float = 1.0, seed: int = 0) -> Dataset:
    """Load a dataset directory; raw ``ratings.tsv`` + ``triplets.tsv`` are preprocessed if no splits exist."""
    d = Path(data_dir)
    if not (d / "splits.tsv").exists():
        return from_ratings(d / "ratings.tsv", d / "triplets.tsv", threshold, seed)
    users, items, ents, rels = IdMap(), IdMap(), IdMap(), IdMap()
    if (d / "nodes.tsv").exists():
        pure = IdMap()
        for lineno, (kind, ext) in _read_rows(d / "nodes.tsv", 2):
            target = {"U": users, "I": items, "E": pure, "R": rels}.get(kind)
            if target is None:
                raise DataFormatError(f"{d / 'nodes.tsv'}:{lineno}: unknown node kind {kind!r}")
            target.add(ext)
        ents = IdMap(items.ids + pure.ids)
    rows: dict[str, list[Interaction]] = {s: [] for s in SPLITS}
    for lineno, (u, i, lab, s) in _read_rows(d / "splits.tsv", 4):
        if s not in rows or lab not in ("0", "1"):
            raise DataFormatError(f"{d / 'splits.tsv'}:{lineno}: bad label or split in {(u, i, lab, s)}")
        rows[s].append(Interaction(users.add(u), items.add(i), int(lab)))
    if len(ents) == 0:
        ents = IdMap(items.ids)
    raw = []
    for _, (h, r, t) in _read_rows(d / "triplets.tsv", 3):
        raw.append((ents.add(h), 2 * rels.add(r), ents.add(t)))
    if len(ents.ids) < len(items) or ents.ids[:len(items)] != items.ids:
        raise DataFormatError(f"{d}: entity ordering does not start with the item catalog")
    kg = KnowledgeGraph.from_triplets(len(items), len(ents), 2 * len(rels), raw)
    clusters = {}
    if (d / "clusters.tsv").exists():
        acc: dict[str, list[int]] = {}
        for _, (kind, _k, c) in _read_rows(d / "clusters.tsv", 3):
            acc.setdefault(kind, []).append(int(c))
        clusters = {k: np.array(v, dtype=np.int64) for k, v in acc.items()}
    return Dataset(users, items, ents, rels, kg, _to_arrays(rows), clusters)
