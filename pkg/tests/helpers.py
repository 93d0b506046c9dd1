"""Small graph builders shared by the tests."""
from __future__ import annotations

import numpy as np

from hicon.data import Dataset, IdMap
from hicon.graph import BipartiteGraph, KnowledgeGraph, build_unified


def random_bipartite(rng, n_users, n_items, p=0.3, edges=None):
    if edges is None:
        mask = rng.random((n_users, n_items)) < p
        edges = list(zip(*np.nonzero(mask)))
    return BipartiteGraph.from_edges(n_users, n_items, [(int(u), int(i)) for u, i in edges])


def random_kg(rng, n_items, n_pure, n_rel, n_triplets):
    E = n_items + n_pure
    trip = [(int(rng.integers(E)), 2 * int(rng.integers(n_rel)), int(rng.integers(E))) for _ in range(n_triplets)]
    return KnowledgeGraph.from_triplets(n_items, E, 2 * n_rel, trip)


def random_unified(rng, n_users, n_items, n_pure, n_rel=2, p=0.3, n_triplets=10):
    return build_unified(random_bipartite(rng, n_users, n_items, p), random_kg(rng, n_items, n_pure, n_rel, n_triplets))


def toy_dataset(seed=0, n_users=5, n_items=8, n_pure=6, n_rel=2):
    """Tiny dataset with every user and item involved in at least one interaction."""
    rng = np.random.default_rng(seed)
    pos = set()
    for u in range(n_users):
        for i in rng.choice(n_items, size=3, replace=False):
            pos.add((u, int(i)))
    for i in range(n_items):
        pos.add((int(rng.integers(n_users)), i))
    train = sorted(pos)
    E = n_items + n_pure
    trip = set()
    for i in range(n_items):
        trip.add((i, 2 * int(rng.integers(n_rel)), n_items + int(rng.integers(n_pure))))
    for _ in range(4):
        trip.add((int(rng.integers(n_items)), 2 * int(rng.integers(n_rel)), int(rng.integers(n_items))))
    kg = KnowledgeGraph.from_triplets(n_items, E, 2 * n_rel, sorted(trip))
    users = IdMap(f"u{k}" for k in range(n_users))
    items = IdMap(f"i{k}" for k in range(n_items))
    ents = IdMap(items.ids + [f"e{k}" for k in range(n_pure)])
    rels = IdMap(f"r{k}" for k in range(n_rel))
    neg = []
    for u in range(n_users):
        free = [i for i in range(n_items) if (u, i) not in pos]
        neg.append((u, free[0], 0))
    rows = np.array([(u, i, 1) for u, i in train], dtype=np.int64)
    splits = {"train": rows, "val": np.array(neg[:2] + [(0, train[0][1], 1)], dtype=np.int64),
              "test": np.array(neg + [(u, i, 1) for u, i in train[:5]], dtype=np.int64)}
    return Dataset(users, items, ents, rels, kg, splits)
