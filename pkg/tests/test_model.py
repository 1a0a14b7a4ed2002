import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from pgrec.dataset import RatingStore
from pgrec.model import (
    Dimensions,
    DivergenceError,
    PropagationLayer,
    TrainConfig,
    assemble_item_reprs,
    assemble_pref_reprs,
    assemble_user_reprs,
    build_operators,
    default_beta,
    embed,
    init_params,
    predict_weight,
    propagate,
    train,
)
from pgrec.model.network import ModelParams, batch_loss, head_forward, weight_names
from pgrec.nmf import Factorization, nmf_factorize
from pgrec.numerics import Tape, backward
from pgrec.prefgraph import NodeKind, SimilarityGraph, build_pref_graph

from conftest import central_difference, dense_propagation, random_weighted_graph, toy_instance


# --- propagation -------------------------------------------------------------------


def test_isolated_node_is_plain_transform(rng):
    x = rng.normal(size=(3, 4))
    theta = rng.normal(size=(4, 2))
    out = propagate(sp.csr_matrix((3, 3)), x, PropagationLayer(theta, beta=2.5))
    np.testing.assert_allclose(out, np.maximum(x @ theta, 0.0), rtol=0, atol=1e-14)


def test_negative_preactivations_are_zeroed():
    w = sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    out = propagate(w, np.ones((2, 1)), PropagationLayer(np.array([[-1.0, 1.0]]), beta=2.0))
    assert (out[:, 0] == 0).all() and (out[:, 1] > 0).all()


def test_mixed_sign_path_matches_dense_formula():
    w = np.array([[0.0, -2.0, 0.0], [-2.0, 0.0, 3.0], [0.0, 3.0, 0.0]])
    h = np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, -1.1]])
    theta = np.array([[0.4, -0.2, 1.0], [0.3, 0.9, -0.5]])
    layer = PropagationLayer(theta, default_beta(sp.csr_matrix(w)))
    assert layer.beta == 4.0
    out = propagate(sp.csr_matrix(w), h, layer)
    np.testing.assert_allclose(out, dense_propagation(w, h, theta, 4.0), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 20))
def test_propagation_matches_dense_on_random_graphs(seed, n):
    rng = np.random.default_rng(seed)
    w = random_weighted_graph(rng, n, density=0.4, signed=True)
    h = rng.normal(size=(n, 3))
    theta = rng.normal(size=(3, 2))
    beta = default_beta(sp.csr_matrix(w))
    assert beta > np.abs(w).max(initial=0.0)
    out = propagate(sp.csr_matrix(w), h, PropagationLayer(theta, beta))
    np.testing.assert_allclose(out, dense_propagation(w, h, theta, beta), rtol=0, atol=1e-12)


@pytest.mark.parametrize("beta", [0.0, -1.0])
def test_layer_rejects_non_positive_beta(beta):
    with pytest.raises(ValueError):
        PropagationLayer(np.eye(2), beta)


def test_propagate_dimension_mismatch():
    with pytest.raises(ValueError):
        propagate(sp.csr_matrix((3, 3)), np.ones((2, 2)), PropagationLayer(np.eye(2), 1.0))
    with pytest.raises(ValueError):
        propagate(sp.csr_matrix((2, 2)), np.ones((2, 3)), PropagationLayer(np.eye(2), 1.0))


# --- assembly ----------------------------------------------------------------------


def test_dimensions_plan():
    dims = Dimensions()
    assert (dims.rank, dims.embed, dims.hidden) == (64, 64, (64, 32))
    p = init_params(dims)
    assert p.weights["theta_item_sim"].shape == (64, 32)
    assert p.weights["halve_w"].shape == (128, 64)
    assert p.weights["head_w0"].shape == (128, 64)
    assert Dimensions(rank=32, embed=64).rank == 32
    with pytest.raises(ValueError):
        Dimensions(rank=128, embed=64)
    with pytest.raises(ValueError):
        Dimensions(rank=5, embed=5)


@pytest.fixture
def toy():
    graph, fac, usim, isim, store = toy_instance(seed=3)
    params = init_params(Dimensions(4, 4, (6, 3)), seed=1)
    ops = build_operators(graph, fac, usim, isim)
    return graph, fac, usim, isim, store, ModelParams(params.dims, params.weights, params.bn_stats, ops.betas)


def test_item_reprs_equal_manual_composition(toy):
    graph, fac, usim, isim, _, params = toy
    w, b = params.weights, params.betas
    items = assemble_item_reprs(fac, isim, graph.user_item_matrix(), params)
    assert items.width == 4 and len(items) == graph.n_items

    fi, fu = fac.item_factors.T, fac.user_factors
    sim = dense_propagation(isim.weights.toarray(), fi, w["theta_item_sim"], b["item_sim"])
    ui = graph.user_item_matrix().toarray()
    block = np.block([[np.zeros((5, 5)), ui], [ui.T, np.zeros((6, 6))]])
    from_users = dense_propagation(block, np.vstack([fu, fi]), w["theta_item_user"], b["item_user"])[5:]
    np.testing.assert_allclose(items.vectors, np.hstack([sim, from_users]), atol=1e-12)


def test_zero_initial_vectors_give_zero_items(toy):
    graph, fac, _, isim, _, params = toy
    zero = Factorization(np.zeros_like(fac.user_factors), np.zeros_like(fac.item_factors))
    items = assemble_item_reprs(zero, isim, graph.user_item_matrix(), params)
    assert not items.vectors.any()


def test_pref_reprs_hand_evaluated():
    store = RatingStore(np.array([0, 0]), np.array([0, 1]), np.array([4.0, 2.0]), 1, 2)
    graph = build_pref_graph(store)
    params = init_params(Dimensions(2, 2, (2,)), seed=0)
    w = dict(params.weights)
    w["halve_w"] = np.array([[1.0, -1.0], [0.5, 0.0], [0.0, 2.0], [-1.0, 1.0]])
    w["halve_b"] = np.array([0.1, -0.2])
    params = params.with_weights(w)
    from pgrec.model import EmbeddingTable

    items = EmbeddingTable("item", np.array([[1.0, 2.0], [3.0, -1.0]]))
    prefs = assemble_pref_reprs(items, graph, params)
    # concat(F_0, F_1) = (1, 2, 3, -1)
    x = np.array([1.0, 2.0, 3.0, -1.0])
    expected = np.maximum(x @ w["halve_w"] + w["halve_b"], 0.0)
    assert prefs.width == 2
    np.testing.assert_allclose(prefs.vectors[0], expected)
    np.testing.assert_allclose(expected, [3.1, 3.8])


def test_pref_reprs_reject_missing_items(toy):
    graph, fac, _, isim, _, params = toy
    items = assemble_item_reprs(fac, isim, graph.user_item_matrix(), params)
    from pgrec.model import EmbeddingTable

    with pytest.raises(ValueError):
        assemble_pref_reprs(EmbeddingTable("item", items.vectors[:-1]), graph, params)


def test_user_reprs_equal_manual_composition(toy):
    graph, fac, usim, isim, _, params = toy
    w, b = params.weights, params.betas
    items = assemble_item_reprs(fac, isim, graph.user_item_matrix(), params)
    prefs = assemble_pref_reprs(items, graph, params)
    users = assemble_user_reprs(fac, usim, prefs, graph, params)
    assert users.width == 4

    fu = fac.user_factors
    sim = dense_propagation(usim.weights.toarray(), fu, w["theta_user_sim"], b["user_sim"])
    up = graph.user_pref_matrix().toarray()
    n, P = up.shape
    block = np.block([[np.zeros((n, n)), up], [up.T, np.zeros((P, P))]])
    from_prefs = dense_propagation(block, np.vstack([fu, prefs.vectors]), w["theta_user_pref"], b["user_pref"])[:n]
    np.testing.assert_allclose(users.vectors, np.hstack([sim, from_prefs]), atol=1e-12)


def test_user_without_similar_users_uses_self_loop_only(toy):
    graph, fac, _, isim, _, params = toy
    empty = SimilarityGraph.empty(NodeKind.USER, graph.n_users)
    items = assemble_item_reprs(fac, isim, graph.user_item_matrix(), params)
    users = assemble_user_reprs(fac, empty, assemble_pref_reprs(items, graph, params), graph, params)
    np.testing.assert_allclose(users.vectors[:, :2], np.maximum(fac.user_factors @ params.weights["theta_user_sim"], 0),
                               atol=1e-14)


def test_tape_forward_matches_assembly(toy):
    graph, fac, usim, isim, _, params = toy
    ops = build_operators(graph, fac, usim, isim, betas=params.betas)
    emb = embed(params, ops, graph)
    items = assemble_item_reprs(fac, isim, graph.user_item_matrix(), params)
    prefs = assemble_pref_reprs(items, graph, params)
    users = assemble_user_reprs(fac, usim, prefs, graph, params)
    np.testing.assert_allclose(emb.items, items.vectors, atol=1e-12)
    np.testing.assert_allclose(emb.users, users.vectors, atol=1e-12)

    # the fused pair predictor agrees with the head applied to assembled vectors
    fast = emb.predict_pairs(graph.up_user, graph.pref_i[graph.up_pref], graph.pref_j[graph.up_pref])
    slow = predict_weight(users.vectors[graph.up_user], prefs.vectors[graph.up_pref], params)
    np.testing.assert_allclose(fast, slow, atol=1e-12)
    one = emb.predict_pairs(2, graph.pref_i[:3], graph.pref_j[:3])
    np.testing.assert_allclose(one, predict_weight(np.repeat(users.vectors[[2]], 3, 0), prefs.vectors[:3], params),
                               atol=1e-12)


# --- head --------------------------------------------------------------------------


def test_hand_sized_head():
    dims = Dimensions(2, 2, (2,))
    w = {
        "head_w0": np.array([[1.0, -2.0], [0.5, 1.0]]),
        "head_b0": np.array([0.0, 0.5]),
        "bn_gamma0": np.array([2.0, 1.0]),
        "bn_beta0": np.array([0.0, -1.0]),
        "head_out_w": np.array([[1.0], [3.0]]),
        "head_out_b": np.array([0.25]),
    }
    bn = {"mean0": np.array([1.0, 0.0]), "var0": np.array([4.0 - 1e-5, 1.0 - 1e-5])}
    tape = Tape()
    p = {k: tape.constant(v) for k, v in w.items()}
    out, _ = head_forward(p, tape.constant(np.array([[2.0, 2.0]])), dims, bn, train=False)
    # hidden = relu(2 + 1, -4 + 2 + 0.5) = (3, 0); bn -> (2 * (3-1)/2, 1 * 0 - 1) = (2, -1)
    assert out.value.item() == pytest.approx(2.0 * 1.0 + (-1.0) * 3.0 + 0.25)


def test_predict_weight_eval_deterministic_and_width_checked(toy):
    *_, params = toy
    rng = np.random.default_rng(0)
    u, p = rng.random((7, 4)), rng.random((7, 4))
    a = predict_weight(u, p, params)
    assert np.array_equal(a, predict_weight(u, p, params))
    with pytest.raises(ValueError):
        predict_weight(u[:, :3], p, params)


def test_train_mode_zero_dropout_equals_eval(toy):
    *_, params = toy
    rng = np.random.default_rng(0)
    u, p = rng.random((7, 4)), rng.random((7, 4))
    train_mode = predict_weight(u, p, params, mode="train", rng=rng, dropout=(0.0, 0.0))
    assert np.array_equal(train_mode, predict_weight(u, p, params))


# --- training ----------------------------------------------------------------------


def test_end_to_end_gradients_match_finite_differences():
    graph, fac, usim, isim, _ = toy_instance(seed=0)
    dims = Dimensions(4, 4, (6, 3))
    params = init_params(dims, seed=2)
    prng = np.random.default_rng(5)
    # random head output and BN statistics so no gradient is structurally zero
    weights = {k: v + 0.1 * prng.normal(size=v.shape) for k, v in params.weights.items()}
    bn = {k: (np.abs(v) + 0.5 if k.startswith("var") else 0.1 * prng.normal(size=v.shape))
          for k, v in params.bn_stats.items()}
    params = params.with_weights(weights, bn)
    ops = build_operators(graph, fac, usim, isim)
    edges = np.arange(len(graph.up_weight))

    def run():
        return batch_loss(params, ops, graph.up_user[edges], graph.up_pref[edges], graph.up_weight[edges],
                          l2=0.0055, train=True, rng=None, frozen_bn=True)

    tape, loss, *_ = run()
    grads = backward(tape, loss)
    for name, arr in params.weights.items():
        num = central_difference(lambda: float(run()[1].value), arr)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-8)
        assert err < 1e-3, (name, err)


def small_config(**kw):
    base = dict(lr=1e-2, l2=0.0, dropout=(0.0, 0.0), batch_size=64, epochs=5, folds=1, pretrain=False)
    base.update(kw)
    return TrainConfig(**base)


def train_rmse(result, graph, fac, usim, isim):
    ops = build_operators(graph, fac, usim, isim, betas=result.params.betas, embed=result.params.dims.embed)
    emb = embed(result.params, ops, graph)
    pred = emb.predict_pairs(graph.up_user, graph.pref_i[graph.up_pref], graph.pref_j[graph.up_pref])
    return float(np.sqrt(np.mean((pred - graph.up_weight) ** 2)))


def test_overfit_tiny_graph():
    # capacity check: regularization off, the training RMSE itself is the oracle
    mat = np.array([[5, 3, 1, 4], [2, 4, 5, 1], [3, 3, 1, 5]], dtype=float)
    u, i = np.nonzero(mat)
    store = RatingStore(u, i, mat[u, i], 3, 4)
    graph = build_pref_graph(store)
    fac = nmf_factorize(store, 2, max_iters=100)
    usim, isim = SimilarityGraph.empty(NodeKind.USER, 3), SimilarityGraph.empty(NodeKind.ITEM, 4)
    result = train(graph, usim, isim, fac, small_config(lr=3e-3, epochs=200), seed=0,
                   dims=Dimensions(2, 16, (32, 32)))
    curve = result.curve("full", "rmse")
    assert len(curve) == 200
    assert min(curve) < 0.05


def test_table4_defaults():
    cfg = TrainConfig()
    assert (cfg.lr, cfg.l2, cfg.dropout, cfg.batch_size) == (1e-4, 0.0055, (0.4, 0.8), 1024)
    assert (cfg.epochs, cfg.patience, cfg.folds) == (30, 5, 5)


def test_zero_epochs_returns_initial_params(toy):
    graph, fac, usim, isim, _, params = toy
    result = train(graph, usim, isim, fac, TrainConfig(epochs=0), init=params)
    assert result.params.equals(params)
    assert result.history == []


def test_training_is_deterministic(toy):
    graph, fac, usim, isim, *_ = toy
    cfg = TrainConfig(lr=1e-3, epochs=3, folds=3, batch_size=8)
    a = train(graph, usim, isim, fac, cfg, seed=11, dims=Dimensions(4, 4, (6, 3)))
    b = train(graph, usim, isim, fac, cfg, seed=11, dims=Dimensions(4, 4, (6, 3)))
    assert a.params.digest() == b.params.digest()
    assert [r.loss for r in a.history] == [r.loss for r in b.history]
    c = train(graph, usim, isim, fac, cfg, seed=12, dims=Dimensions(4, 4, (6, 3)))
    assert c.params.digest() != a.params.digest()


def test_pretraining_selects_best_fold(toy):
    graph, fac, usim, isim, *_ = toy
    result = train(graph, usim, isim, fac, TrainConfig(lr=1e-3, epochs=4, folds=3, batch_size=8), seed=0,
                   dims=Dimensions(4, 4, (6, 3)))
    assert len(result.fold_scores) == 3
    assert result.best_fold == int(np.argmin(result.fold_scores))
    assert {r.phase for r in result.history} == {"fold0", "fold1", "fold2", "full"}
    assert len(result.curve("full")) == 4


def test_fold_operators_hide_validation_edges(toy):
    graph, fac, usim, isim, *_ = toy
    mask = graph.up_user != 0
    ops = build_operators(graph, fac, usim, isim, edge_mask=mask)
    row = ops.user_pref_adj.getrow(0)
    assert row.count_nonzero() == 0
    full = build_operators(graph, fac, usim, isim)
    assert full.user_pref_adj.getrow(0).count_nonzero() > 0


def test_divergence_reports_epoch(toy):
    graph, fac, usim, isim, _, params = toy
    w = dict(params.weights)
    w["head_out_b"] = np.array([np.nan])
    with pytest.raises(DivergenceError, match="epoch 1") as info:
        train(graph, usim, isim, fac, small_config(epochs=2), init=params.with_weights(w))
    assert info.value.epoch == 1


def test_train_requires_edges():
    store = RatingStore(np.array([0, 1]), np.array([0, 1]), np.array([3.0, 4.0]), 2, 2)
    graph = build_pref_graph(store)
    fac = Factorization(np.ones((2, 2)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        train(graph, SimilarityGraph.empty(NodeKind.USER, 2), SimilarityGraph.empty(NodeKind.ITEM, 2), fac)


def test_l2_covers_kernels_only():
    names = weight_names(Dimensions(4, 4, (6, 3)))
    assert "head_w1" in names and "halve_w" in names
    assert not any(n.startswith(("bn_", "head_b", "halve_b", "head_out_b")) for n in names)
