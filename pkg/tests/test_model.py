import numpy as np
import pytest

from hicon import autodiff as ad
from hicon.autodiff import ContractError, Tape, grad_check
from hicon.graph import BipartiteGraph, KnowledgeGraph, build_unified
from hicon.metapath import MetaPathSubgraph, build_subgraph, parse_metapath
from hicon.model import (HiCON, ModelConfig, ModelParams, LayerState, attention_weights, dual_layer, gcn_layer,
                         high_order_encode, light_propagate, load_checkpoint, low_order_encode, predict,
                         recursive_encode, relation_attention, save_checkpoint)
from helpers import random_bipartite, random_kg, random_unified, toy_dataset


def const(x, tape=None):
    return (tape or Tape()).constant(np.asarray(x, dtype=np.float64))


def leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


# -- light propagation -----------------------------------------------------------------

def dense_bipartite(b: BipartiteGraph):
    a = np.zeros((b.user_count, b.item_count))
    a[b.users, b.items] = 1.0
    du, di = a.sum(1), a.sum(0)
    inv_u = np.where(du > 0, 1 / np.sqrt(np.where(du > 0, du, 1)), 0)
    inv_i = np.where(di > 0, 1 / np.sqrt(np.where(di > 0, di, 1)), 0)
    return inv_u[:, None] * a * inv_i[None, :]


def test_light_propagate_worked_example():
    b = BipartiteGraph.from_edges(2, 2, [(0, 0), (0, 1), (1, 0)])
    t = Tape()
    to_items, _ = light_propagate(b, const([[1.0, 0.0], [0.0, 1.0]], t), const(np.zeros((2, 2)), t))
    np.testing.assert_allclose(to_items.value[0], [0.5, 0.70710678], atol=1e-8)


def test_light_propagate_isolated_item_is_zero():
    b = BipartiteGraph.from_edges(2, 3, [(0, 0), (1, 1)])
    t = Tape()
    to_items, to_users = light_propagate(b, const(np.ones((2, 4)), t), const(np.ones((3, 4)), t))
    assert to_items.value[2].tolist() == [0.0] * 4


@pytest.mark.parametrize("seed", range(100))
def test_light_propagate_matches_dense(seed):
    rng = np.random.default_rng(seed)
    nu, ni = int(rng.integers(1, 20)), int(rng.integers(1, 20))
    b = random_bipartite(rng, nu, ni, float(rng.uniform(0.05, 0.6)))
    eu, ei = rng.normal(size=(nu, 5)), rng.normal(size=(ni, 5))
    t = Tape()
    to_items, to_users = light_propagate(b, const(eu, t), const(ei, t))
    m = dense_bipartite(b)
    np.testing.assert_allclose(to_items.value, m.T @ eu, atol=1e-10, rtol=0)
    np.testing.assert_allclose(to_users.value, m @ ei, atol=1e-10, rtol=0)


def test_light_propagate_shape_errors():
    b = BipartiteGraph.from_edges(2, 2, [(0, 0)])
    t = Tape()
    with pytest.raises(ContractError):
        light_propagate(b, const(np.ones((3, 2)), t), const(np.ones((2, 2)), t))
    with pytest.raises(ContractError):
        light_propagate(b, const(np.ones((2, 2)), t), const(np.ones((2, 3)), t))


# -- gcn layer --------------------------------------------------------------------------

def dense_gcn(sub: MetaPathSubgraph, z, w):
    n = sub.node_count
    a = np.zeros((n, n))
    for x, y in sub.edges.tolist():
        a[x, y] = a[y, x] = 1.0
    d = a.sum(1)
    inv = np.where(d > 0, 1 / np.sqrt(np.where(d > 0, d, 1)), 0)
    return leaky((inv[:, None] * a * inv[None, :]) @ z @ w)


def test_gcn_two_nodes_identity_swaps():
    sub = MetaPathSubgraph.from_edges(parse_metapath("UI"), 2, [(0, 1)])
    t = Tape()
    out = gcn_layer(sub, const([[1.0, 2.0], [3.0, 4.0]], t), const(np.eye(2), t))
    assert out.value.tolist() == [[3.0, 4.0], [1.0, 2.0]]


def test_gcn_negative_preactivation_is_scaled():
    sub = MetaPathSubgraph.from_edges(parse_metapath("UI"), 2, [(0, 1)])
    t = Tape()
    out = gcn_layer(sub, const([[-1.0, -2.0], [-3.0, -4.0]], t), const(np.eye(2), t))
    np.testing.assert_allclose(out.value, 0.2 * np.array([[-3.0, -4.0], [-1.0, -2.0]]), rtol=1e-15)


@pytest.mark.parametrize("seed", range(100))
def test_gcn_layer_matches_dense(seed):
    rng = np.random.default_rng(1000 + seed)
    n = int(rng.integers(2, 41))
    pairs = [(int(a), int(b)) for a, b in rng.integers(0, n, size=(int(rng.integers(0, 3 * n)), 2))]
    sub = MetaPathSubgraph.from_edges(parse_metapath("UIU"), n, pairs)
    z, w = rng.normal(size=(n, 4)), rng.normal(size=(4, 4))
    t = Tape()
    out = gcn_layer(sub, const(z, t), const(w, t))
    np.testing.assert_allclose(out.value, dense_gcn(sub, z, w), atol=1e-10, rtol=0)
    isolated = sub.degrees == 0
    assert not out.value[isolated].any()


# -- relation attention ------------------------------------------------------------------

def attention_oracle(kg: KnowledgeGraph, ent, rel):
    out = np.zeros_like(ent)
    for h in range(kg.entity_count):
        trip = kg.head_adjacency(h)
        if not trip:
            continue
        logits, msgs = [], []
        for r, t in trip:
            sh, st = ent[h] * rel[r], ent[t] * rel[r]
            sh = sh / np.linalg.norm(sh) if np.linalg.norm(sh) > 0 else sh
            st_n = st / np.linalg.norm(st) if np.linalg.norm(st) > 0 else st
            logits.append(float(sh @ st_n))
            msgs.append(st)
        beta = np.exp(np.array(logits) - max(logits))
        beta /= beta.sum()
        out[h] = sum(b * m for b, m in zip(beta, msgs))
    return out


def test_attention_single_triplet():
    kg = KnowledgeGraph.from_triplets(1, 2, 2, [(0, 0, 1)])
    rng = np.random.default_rng(0)
    ent, rel = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    t = Tape()
    g = relation_attention(kg, const(ent, t), const(rel, t))
    np.testing.assert_allclose(g.value[0], rel[0] * ent[1], rtol=1e-14)


def test_attention_logit_of_identical_vectors_is_one():
    kg = KnowledgeGraph.from_triplets(2, 3, 2, [(0, 0, 1), (0, 0, 2)])
    ent = np.array([[1.0, 2.0], [1.0, 2.0], [-2.0, 1.0]])
    rel = np.array([[0.5, 3.0], [1.0, 1.0]])
    t = Tape()
    beta = attention_weights(kg, const(ent, t), const(rel, t))
    heads = kg.heads
    # item 0: logits 1 (identical vectors) and cos of the orthogonal pair scaled by relation
    s0 = ent[0] * rel[0] / np.linalg.norm(ent[0] * rel[0])
    s2 = ent[2] * rel[0] / np.linalg.norm(ent[2] * rel[0])
    expect = np.exp([1.0, s0 @ s2])
    np.testing.assert_allclose(beta[heads == 0], expect / expect.sum(), rtol=1e-13)


@pytest.mark.parametrize("seed", range(100))
def test_attention_normalizes_per_item(seed):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng, int(rng.integers(1, 10)), int(rng.integers(1, 10)), int(rng.integers(1, 4)),
                   int(rng.integers(1, 30)))
    ent, rel = rng.normal(size=(kg.entity_count, 6)), rng.normal(size=(kg.relation_count, 6))
    t = Tape()
    beta = attention_weights(kg, const(ent, t), const(rel, t))
    sums = np.bincount(kg.heads, weights=beta, minlength=kg.entity_count)
    has = np.bincount(kg.heads, minlength=kg.entity_count) > 0
    assert np.all(np.abs(sums[has] - 1.0) <= 1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_attention_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng, 10, 6, 3, 25)
    ent, rel = rng.normal(size=(kg.entity_count, 5)), rng.normal(size=(kg.relation_count, 5))
    t = Tape()
    got = relation_attention(kg, const(ent, t), const(rel, t)).value
    np.testing.assert_allclose(got, attention_oracle(kg, ent, rel), atol=1e-12, rtol=0)


def test_attention_items_only():
    kg = KnowledgeGraph.from_triplets(1, 2, 2, [(0, 0, 1)])
    t = Tape()
    g = relation_attention(kg, const(np.ones((2, 2)), t), const(np.ones((2, 2)), t), items_only=True)
    assert g.value[1].tolist() == [0.0, 0.0]
    assert g.value[0].tolist() == [1.0, 1.0]


# -- dual layers and low-order encoding --------------------------------------------------

def test_dual_layer_sum_pooling_cases():
    # item 0: one user, no triplets; item 1: no users, one triplet to entity 2
    bip = BipartiteGraph.from_edges(1, 2, [(0, 0)])
    kg = KnowledgeGraph.from_triplets(2, 3, 2, [(1, 0, 2)])
    g = build_unified(bip, kg)
    t = Tape()
    user = const([[1.0, 2.0]], t)
    ent = const([[0.5, 0.5], [1.0, 1.0], [3.0, 4.0]], t)
    rel = const([[2.0, 1.0], [1.0, 1.0]], t)
    nxt = dual_layer(g, LayerState(user, ent), rel)
    assert nxt.entity.value[0].tolist() == [1.0, 2.0]  # h only
    assert nxt.entity.value[1].tolist() == [6.0, 4.0]  # g only: e_r * e_t
    np.testing.assert_array_equal(nxt.entity.value, nxt.item_side.value + nxt.kg_side.value)
    assert nxt.user.value.tolist() == [[0.5, 0.5]]


def low_order_oracle(g, user0, ent0, rel, depth=2):
    """Straight-line forward pass written with dense matrices and explicit loops."""
    b = g.bipartite
    m = dense_bipartite(b)
    I = g.item_count
    u, e = user0.copy(), ent0.copy()
    u_sum, e_sum = u.copy(), e.copy()
    for _ in range(depth):
        h_items = m.T @ u
        h_users = m @ e[:I]
        kg_side = attention_oracle(g.kg, e, rel)
        e_new = kg_side.copy()
        e_new[:I] += h_items
        u, e = h_users, e_new
        u_sum += u
        e_sum += e
    return u_sum, e_sum


@pytest.mark.parametrize("seed", range(5))
def test_low_order_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_unified(rng, 6, 7, 5, n_rel=2, p=0.3, n_triplets=12)
    user0 = rng.normal(size=(6, 4))
    ent0 = rng.normal(size=(g.entity_count, 4))
    rel = rng.normal(size=(g.kg.relation_count, 4))
    t = Tape()
    out = low_order_encode(g, const(user0, t), const(ent0, t), const(rel, t))
    u_ref, e_ref = low_order_oracle(g, user0, ent0, rel)
    np.testing.assert_allclose(out.user.value, u_ref, atol=1e-12, rtol=0)
    np.testing.assert_allclose(out.entity.value, e_ref, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(out.item.value, out.entity.value[:7])
    layers = out.layers
    assert len(layers) == 3
    np.testing.assert_array_equal(out.entity.value, layers[0].entity.value + layers[1].entity.value
                                  + layers[2].entity.value)


def test_isolated_node_keeps_initial_embedding():
    g = build_unified(BipartiteGraph.from_edges(2, 2, [(0, 0)]), KnowledgeGraph.from_triplets(2, 3, 2, []))
    rng = np.random.default_rng(0)
    user0, ent0 = rng.normal(size=(2, 3)), rng.normal(size=(3, 3))
    t = Tape()
    out = low_order_encode(g, const(user0, t), const(ent0, t), const(rng.normal(size=(2, 3)), t))
    np.testing.assert_array_equal(out.user.value[1], user0[1])
    np.testing.assert_array_equal(out.entity.value[1], ent0[1])
    np.testing.assert_array_equal(out.entity.value[2], ent0[2])


def test_zero_tables_give_zero_outputs():
    g = random_unified(np.random.default_rng(1), 4, 5, 3, n_triplets=8)
    t = Tape()
    out = low_order_encode(g, const(np.zeros((4, 3)), t), const(np.zeros((8, 3)), t), const(np.zeros((4, 3)), t))
    assert not out.user.value.any() and not out.entity.value.any()


def test_recursive_depth_two_equals_low_order():
    rng = np.random.default_rng(2)
    g = random_unified(rng, 5, 6, 4, n_triplets=10)
    args = [rng.normal(size=(5, 3)), rng.normal(size=(10, 3)), rng.normal(size=(4, 3))]
    t = Tape()
    a = low_order_encode(g, *(const(x, t) for x in args))
    b = recursive_encode(g, *(const(x, t) for x in args), depth=2)
    np.testing.assert_array_equal(a.user.value, b.user.value)
    np.testing.assert_array_equal(a.entity.value, b.entity.value)


def test_recursive_depth_one_on_isolated_graph():
    g = build_unified(BipartiteGraph.from_edges(2, 2, []), KnowledgeGraph.from_triplets(2, 2, 2, []))
    rng = np.random.default_rng(0)
    user0, ent0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    t = Tape()
    out = recursive_encode(g, const(user0, t), const(ent0, t), const(np.ones((2, 3)), t), depth=1)
    np.testing.assert_array_equal(out.user.value, user0)
    np.testing.assert_array_equal(out.entity.value, ent0)
    with pytest.raises(ValueError):
        recursive_encode(g, const(user0, t), const(ent0, t), const(np.ones((2, 3)), t), depth=0)


# -- high-order encoding -----------------------------------------------------------------

def _subgraphs(g, names):
    return {n: build_subgraph(g, parse_metapath(n)) for n in names}


def test_high_order_single_and_mean_pooling():
    rng = np.random.default_rng(4)
    g = random_unified(rng, 5, 6, 4, p=0.4, n_triplets=10)
    subs = _subgraphs(g, ["UIUIU", "UIEIU", "IUIUI"])
    d = 3
    z0 = rng.normal(size=(g.node_count, d))
    t = Tape()
    weights = {n: [const(rng.normal(size=(d, d)), t) for _ in range(4)] for n in subs}
    one = high_order_encode(subs, const(z0, t), weights, ["UIUIU"], ["IUIUI"], 5, 6)
    np.testing.assert_array_equal(one.user.value, one.per_path["UIUIU"].value[:5])
    np.testing.assert_array_equal(one.item.value, one.per_path["IUIUI"].value[5:11])
    two = high_order_encode(subs, const(z0, t), weights, ["UIUIU", "UIEIU"], ["IUIUI"], 5, 6)
    mean = (two.per_path["UIUIU"].value[:5] + two.per_path["UIEIU"].value[:5]) / 2
    np.testing.assert_allclose(two.user.value, mean, rtol=1e-15)
    total = high_order_encode(subs, const(z0, t), weights, ["UIUIU", "UIEIU"], ["IUIUI"], 5, 6, pooling="sum")
    np.testing.assert_allclose(total.user.value, 2 * mean, rtol=1e-15)
    # last layer only: four stacked dense layers
    z = z0
    for w in weights["UIUIU"]:
        z = dense_gcn(subs["UIUIU"], z, w.value)
    np.testing.assert_allclose(one.per_path["UIUIU"].value, z, atol=1e-12)


def test_high_order_pooling_of_two_outputs():
    # two meta-paths whose outputs for node 0 are [1, 0] and [0, 1]
    g = build_unified(BipartiteGraph.from_edges(1, 1, [(0, 0)]), KnowledgeGraph.from_triplets(1, 1, 2, []))
    a = MetaPathSubgraph.from_edges(parse_metapath("UI"), 2, [(0, 1)])
    b = MetaPathSubgraph.from_edges(parse_metapath("UI"), 2, [(0, 1)])
    t = Tape()
    z0 = const([[9.0, 9.0], [1.0, 1.0]], t)
    weights = {"A": [const([[1.0, 0.0], [0.0, 0.0]], t)], "B": [const([[0.0, 0.0], [0.0, 1.0]], t)]}
    out = high_order_encode({"A": a, "B": b}, z0, weights, ["A", "B"], ["A"], 1, 1)
    assert out.user.value.tolist() == [[0.5, 0.5]]


def test_node_outside_every_subgraph_is_zero():
    g = build_unified(BipartiteGraph.from_edges(3, 2, [(0, 0), (1, 0), (0, 1), (1, 1)]),
                      KnowledgeGraph.from_triplets(2, 2, 2, []))
    subs = _subgraphs(g, ["UIUIU", "IUIUI"])
    t = Tape()
    z0 = const(np.ones((g.node_count, 2)), t)
    w = {n: [const(np.eye(2), t)] * 4 for n in subs}
    out = high_order_encode(subs, z0, w, ["UIUIU"], ["IUIUI"], 3, 2)
    assert out.user.value[2].tolist() == [0.0, 0.0]


def test_high_order_needs_metapaths():
    t = Tape()
    with pytest.raises(ValueError):
        high_order_encode({}, const(np.ones((2, 2)), t), {}, [], ["A"], 1, 1)


# -- prediction ---------------------------------------------------------------------------

def test_predict_examples():
    t = Tape()
    e_u, z_u, e_i, z_i = (const([[1.0, 0.0]], t), const([[0.0, 1.0]], t), const([[1.0, 0.0]], t),
                          const([[0.0, 1.0]], t))
    assert predict(e_u, z_u, e_i, z_i).value.tolist() == [2.0]
    assert predict(e_u, z_u, e_i, z_i, "high_only").value.tolist() == [1.0]
    assert predict(e_u, z_u, e_i, z_i, "low_only").value.tolist() == [1.0]


def test_predict_equals_concatenated_dot_and_decomposes():
    rng = np.random.default_rng(5)
    t = Tape()
    parts = [rng.normal(size=(10, 4)) for _ in range(4)]
    e_u, z_u, e_i, z_i = (const(p, t) for p in parts)
    full = predict(e_u, z_u, e_i, z_i).value
    concat = np.einsum("ij,ij->i", np.hstack([parts[0], parts[1]]), np.hstack([parts[2], parts[3]]))
    np.testing.assert_allclose(full, concat, rtol=1e-14)
    low = predict(e_u, z_u, e_i, z_i, "low_only").value
    high = predict(e_u, z_u, e_i, z_i, "high_only").value
    np.testing.assert_array_equal(full, low + high)


def test_predict_errors():
    t = Tape()
    with pytest.raises(ContractError):
        predict(const(np.ones((1, 2)), t), const(np.ones((1, 2)), t), const(np.ones((1, 3)), t),
                const(np.ones((1, 2)), t))
    with pytest.raises(ContractError):
        predict(const(np.ones((1, 2)), t), None, const(np.ones((1, 2)), t), None, "full")
    with pytest.raises(ValueError):
        predict(const(np.ones((1, 2)), t), None, const(np.ones((1, 2)), t), None, "both")


# -- assembled model ---------------------------------------------------------------------

def toy_model(**kw):
    ds = toy_dataset()
    model = HiCON(ds.unified(), ModelConfig(dim=4, **kw))
    return ds, model, model.init_params(np.random.default_rng(0))


def test_param_shapes_and_xavier_bounds():
    ds, model, params = toy_model()
    assert params.user.shape == (5, 4) and params.entity.shape == (14, 4) and params.relation.shape == (4, 4)
    assert sorted(params.gcn) == sorted(["UIUIU", "UIEIU", "IUIEI", "IEIUI", "IUIUI"])
    assert all(len(ws) == 4 and ws[0].shape == (4, 4) for ws in params.gcn.values())
    assert np.abs(params.user).max() <= np.sqrt(6 / 9)
    assert params.size() == 5 * 4 + 14 * 4 + 4 * 4 + 5 * 4 * 16


def test_checkpoint_roundtrip_is_exact_and_byte_stable(tmp_path):
    _, _, params = toy_model()
    save_checkpoint(params, tmp_path / "a.txt")
    loaded = load_checkpoint(tmp_path / "a.txt")
    for k, v in params.named().items():
        np.testing.assert_array_equal(loaded.named()[k], v)
    save_checkpoint(loaded, tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    (tmp_path / "bad.txt").write_text("nope\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.txt")


def test_ablation_shapes():
    _, model, params = toy_model(disable_high=True)
    reps = model.represent(params)
    assert reps.user_high is None and not params.gcn
    _, model, params = toy_model(disable_low=True)
    reps = model.represent(params)
    np.testing.assert_array_equal(reps.user_low.value, params.user)
    np.testing.assert_array_equal(reps.item_low.value, params.entity[:8])
    _, model, params = toy_model(recursive_depth=3)
    assert model.represent(params).user_high is None
    with pytest.raises(ValueError):
        toy_model(disable_low=True, disable_high=True)


def test_model_permutation_equivariance():
    ds, model, params = toy_model()
    g = ds.unified()
    rng = np.random.default_rng(9)
    perm = rng.permutation(g.user_count)  # new user k is old user perm[k]
    inv = np.argsort(perm)
    b = g.bipartite
    bip = BipartiteGraph.from_edges(g.user_count, g.item_count, zip(inv[b.users].tolist(), b.items.tolist()))
    g2 = build_unified(bip, g.kg)
    model2 = HiCON(g2, model.config)
    p2 = params.copy()
    p2.user = params.user[perm]
    r1, r2 = model.represent(params), model2.represent(p2)
    np.testing.assert_allclose(r2.user_low.value, r1.user_low.value[perm], atol=1e-13)
    np.testing.assert_allclose(r2.user_high.value, r1.user_high.value[perm], atol=1e-13)
    np.testing.assert_allclose(r2.item_high.value, r1.item_high.value, atol=1e-13)


def test_output_coordinate_gradients():
    ds, model, params = toy_model()
    for users, items in (([0], [3]), ([4], [7])):
        report = grad_check(lambda L: ad.total(model.forward(L).score(np.array(users), np.array(items))),
                            params.named(), tol=1e-4)
        assert report.passed, report.summary()
