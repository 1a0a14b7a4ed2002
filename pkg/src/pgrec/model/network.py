"""Representation assembly and the preference-weight regression head.

Branch layout, with ``d`` the final embedding width and ``f`` the NMF rank:

* items   ``F'_i = [relu(A_I Fi theta_is) | relu(A_UI [Fu; Fi] theta_iu)]``
* prefs   ``F_p  = relu([F'_i, F'_j] W_h + b_h)`` for canonical ``i < j``
* users   ``F_u  = [relu(A_U Fu theta_us) | relu(A_UP [Fu; F_p] theta_up)]``
* head    ``[F_u, F_p] -> dense/relu/BN/dropout x2 -> linear -> w_hat``

``A_*`` are normalized adjacencies (see :mod:`.propagation`).  Every
operator that only touches fixed NMF signals is folded into a constant once;
only the user-from-preference branch sees trainable signals.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from ..nmf import Factorization
from ..numerics import autodiff as ad
from ..numerics.autodiff import Tape
from ..prefgraph import PrefGraph, SimilarityGraph
from .propagation import bipartite_block, default_beta, normalized_adjacency

BRANCHES = ("item_sim", "item_user", "user_sim", "user_pref")


@dataclass(frozen=True)
class Dimensions:
    rank: int = 64  # NMF rank f
    embed: int = 64  # final user/item/preference width d
    hidden: tuple = (64, 32)

    def __post_init__(self):
        if self.embed % 2:
            raise ValueError("embedding width must be even (two branches of d/2)")
        if not 1 <= self.rank <= self.embed:
            raise ValueError("NMF rank must lie in [1, d]: users carry their (zero-padded) NMF "
                             "vector as self-signal next to width-d preference vectors")
        if not self.hidden:
            raise ValueError("the head needs at least one hidden layer")


def weight_names(dims: Dimensions) -> list[str]:
    """Names of the parameters that carry the L2 penalty."""
    names = [f"theta_{b}" for b in BRANCHES] + ["halve_w"]
    names += [f"head_w{k}" for k in range(len(dims.hidden))] + ["head_out_w"]
    return names


@dataclass(frozen=True, eq=False)
class ModelParams:
    dims: Dimensions
    weights: dict
    bn_stats: dict
    betas: dict = field(default_factory=dict)

    def with_weights(self, weights: dict, bn_stats: dict | None = None) -> "ModelParams":
        return replace(self, weights=weights, bn_stats=self.bn_stats if bn_stats is None else bn_stats)

    def arrays(self) -> dict:
        return {**{f"w/{k}": v for k, v in self.weights.items()}, **{f"bn/{k}": v for k, v in self.bn_stats.items()}}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def pad_to(x: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the columns of ``x`` up to ``width``."""
    return np.pad(x, ((0, 0), (0, width - x.shape[1])))


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(dims: Dimensions, seed=0, betas: dict | None = None) -> ModelParams:
    rng = np.random.default_rng(seed)
    f, d, half = dims.rank, dims.embed, dims.embed // 2
    w = {
        "theta_item_sim": _glorot(rng, f, half),
        "theta_item_user": _glorot(rng, f, half),
        "theta_user_sim": _glorot(rng, f, half),
        "theta_user_pref": _glorot(rng, d, half),
        "halve_w": _glorot(rng, 2 * d, d),
        "halve_b": np.zeros(d),
    }
    bn = {}
    width = 2 * d
    for k, h in enumerate(dims.hidden):
        w[f"head_w{k}"] = _glorot(rng, width, h)
        w[f"head_b{k}"] = np.zeros(h)
        w[f"bn_gamma{k}"] = np.ones(h)
        w[f"bn_beta{k}"] = np.zeros(h)
        bn[f"mean{k}"] = np.zeros(h)
        bn[f"var{k}"] = np.ones(h)
        width = h
    # predictions start at the neutral weight 0 instead of amplified dropout noise
    w["head_out_w"] = np.zeros((width, 1))
    w["head_out_b"] = np.zeros(1)
    return ModelParams(dims, w, bn, dict(betas or {}))


@dataclass(frozen=True, eq=False)
class GraphOperators:
    """Constant inputs of the forward pass for one set of user-preference edges."""

    item_sim_signal: np.ndarray  # A_I Fi           (m x f)
    item_user_signal: np.ndarray  # A_UI [Fu; Fi]   rows of items (m x f)
    user_sim_signal: np.ndarray  # A_U Fu           (n x f)
    user_self_signal: np.ndarray  # diag(A_UP) [Fu 0]  (n x d)
    user_pref_adj: sp.csr_matrix  # A_UP user x pref block (n x P)
    pref_i: np.ndarray
    pref_j: np.ndarray
    betas: dict


def build_operators(
    graph: PrefGraph,
    factorization: Factorization,
    user_sim: SimilarityGraph,
    item_sim: SimilarityGraph,
    edge_mask: np.ndarray | None = None,
    betas: dict | None = None,
    embed: int | None = None,
) -> GraphOperators:
    """Fold the fixed parts of all four branches into constants.

    ``edge_mask`` restricts which user-preference edges feed the user branch
    (cross-validation folds hide their validation edges this way).  ``betas``
    overrides the per-graph self-loop weight; missing entries default to one
    more than the graph's largest absolute weight.  ``embed`` is the final
    width ``d`` (defaults to the NMF rank).
    """
    n, m, P = graph.n_users, graph.n_items, graph.n_prefs
    fu = factorization.user_factors
    fi = factorization.item_factors.T
    betas = dict(betas or {})

    def beta_for(name, w):
        if name not in betas:
            betas[name] = default_beta(w)
        return betas[name]

    a_i = normalized_adjacency(item_sim.weights, beta_for("item_sim", item_sim.weights))
    ui = graph.user_item_matrix()
    a_ui = normalized_adjacency(bipartite_block(ui), beta_for("item_user", ui))
    a_u = normalized_adjacency(user_sim.weights, beta_for("user_sim", user_sim.weights))

    mask = slice(None) if edge_mask is None else np.asarray(edge_mask, dtype=bool)
    up = sp.csr_matrix(
        (graph.up_weight[mask], (graph.up_user[mask], graph.up_pref[mask])), shape=(n, P)
    )
    a_up = normalized_adjacency(bipartite_block(up), beta_for("user_pref", up))

    return GraphOperators(
        item_sim_signal=np.asarray(a_i @ fi),
        item_user_signal=np.asarray(a_ui[n:] @ np.vstack([fu, fi])),
        user_sim_signal=np.asarray(a_u @ fu),
        user_self_signal=a_up.diagonal()[:n, None] * pad_to(fu, embed or fu.shape[1]),
        user_pref_adj=a_up[:n, n:].tocsr(),
        pref_i=graph.pref_i,
        pref_j=graph.pref_j,
        betas=betas,
    )


def _item_reprs(p, ops: GraphOperators, tape: Tape):
    item_sim = ad.relu(tape.constant(ops.item_sim_signal) @ p["theta_item_sim"])
    item_user = ad.relu(tape.constant(ops.item_user_signal) @ p["theta_item_user"])
    return ad.concat([item_sim, item_user], axis=1)


def _pref_reprs(p, items, pi, pj, d):
    # [F_i, F_j] W = F_i W_top + F_j W_bot, evaluated per item before the gather
    w = p["halve_w"]
    top = items @ _rows(w, 0, d)
    bot = items @ _rows(w, d, 2 * d)
    return ad.relu(ad.take_rows(top, pi) + ad.take_rows(bot, pj) + p["halve_b"])


def _rows(var, lo, hi):
    return ad.take_rows(var, np.arange(lo, hi))


def _user_reprs(p, prefs, ops: GraphOperators, tape: Tape):
    user_sim = ad.relu(tape.constant(ops.user_sim_signal) @ p["theta_user_sim"])
    pooled = ad.spmm(ops.user_pref_adj, prefs) + tape.constant(ops.user_self_signal)
    user_pref = ad.relu(pooled @ p["theta_user_pref"])
    return ad.concat([user_sim, user_pref], axis=1)


def head_forward(p, x, dims: Dimensions, bn_stats: dict, *, train: bool, rng=None,
                 dropout=(0.0, 0.0), frozen_bn: bool = False):
    """Regression head on concatenated ``[user, preference]`` rows.

    Returns ``(predictions, batch_stats)``; ``batch_stats`` holds the batch
    means/variances when batch statistics were used, for the running update.
    """
    h = x
    stats = {}
    for k in range(len(dims.hidden)):
        h = ad.relu(h @ p[f"head_w{k}"] + p[f"head_b{k}"])
        use_running = frozen_bn or not train
        h, mu, var = ad.batch_norm(
            h, p[f"bn_gamma{k}"], p[f"bn_beta{k}"],
            mean=bn_stats[f"mean{k}"] if use_running else None,
            var=bn_stats[f"var{k}"] if use_running else None,
        )
        if not use_running:
            stats[f"mean{k}"], stats[f"var{k}"] = mu, var
        if train:
            h = ad.dropout(h, dropout[k] if k < len(dropout) else 0.0, rng)
    out = h @ p["head_out_w"] + p["head_out_b"]
    return out, stats


def forward(p, ops: GraphOperators, dims: Dimensions, tape: Tape):
    """Item, preference and user representations as tape variables."""
    items = _item_reprs(p, ops, tape)
    prefs = _pref_reprs(p, items, ops.pref_i, ops.pref_j, dims.embed)
    users = _user_reprs(p, prefs, ops, tape)
    return items, prefs, users


def batch_loss(params: ModelParams, ops: GraphOperators, users_idx, prefs_idx, targets, *,
               l2: float = 0.0, train: bool = True, rng=None, dropout=(0.0, 0.0),
               frozen_bn: bool = False):
    """Build the tape for one batch; returns ``(tape, loss, rmse, batch_stats)``."""
    tape = Tape()
    p = {k: tape.parameter(k, v) for k, v in params.weights.items()}
    _, prefs, users = forward(p, ops, params.dims, tape)
    x = ad.concat([ad.take_rows(users, users_idx), ad.take_rows(prefs, prefs_idx)], axis=1)
    pred, stats = head_forward(p, x, params.dims, params.bn_stats, train=train, rng=rng,
                               dropout=dropout, frozen_bn=frozen_bn)
    err = pred - tape.constant(np.asarray(targets, dtype=np.float64).reshape(-1, 1))
    rmse = ad.sqrt(ad.mean_all(ad.square(err)))
    loss = rmse
    if l2:
        penalty = None
        for name in weight_names(params.dims):
            term = ad.sum_all(ad.square(p[name]))
            penalty = term if penalty is None else penalty + term
        loss = rmse + penalty * l2
    return tape, loss, float(rmse.value), stats


# --- inference (no tape recording) -------------------------------------------------


def _constants(params: ModelParams):
    tape = Tape()
    return tape, {k: tape.constant(v) for k, v in params.weights.items()}


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    """Row ``k`` is the vector of node ``k`` of one node kind."""

    kind: str
    vectors: np.ndarray

    def __getitem__(self, index):
        return self.vectors[index]

    def __len__(self):
        return len(self.vectors)

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


def assemble_item_reprs(factorization: Factorization, item_sim: SimilarityGraph, user_item: sp.spmatrix,
                        params: ModelParams) -> EmbeddingTable:
    """Item vectors from similar items and from the users who rated them."""
    fu, fi = factorization.user_factors, factorization.item_factors.T
    n = fu.shape[0]
    betas = params.betas
    w = params.weights
    half = params.dims.embed // 2
    if w["theta_item_sim"].shape[1] != half or w["theta_item_user"].shape[1] != half:
        raise ValueError("item branches must both produce d/2 columns")
    a_i = normalized_adjacency(item_sim.weights, betas.get("item_sim", default_beta(item_sim.weights)))
    a_ui = normalized_adjacency(bipartite_block(user_item), betas.get("item_user", default_beta(user_item)))
    sim = np.maximum(np.asarray(a_i @ fi) @ w["theta_item_sim"], 0.0)
    from_users = np.maximum(np.asarray(a_ui @ np.vstack([fu, fi]))[n:] @ w["theta_item_user"], 0.0)
    return EmbeddingTable("item", np.hstack([sim, from_users]))


def pair_reprs(items: np.ndarray, i, j, params: ModelParams) -> np.ndarray:
    """Preference vectors for canonical pairs ``i < j`` straight from item vectors."""
    d = params.dims.embed
    w = params.weights["halve_w"]
    if items.shape[1] != d:
        raise ValueError(f"item vectors have width {items.shape[1]}, expected {d}")
    return np.maximum(items[i] @ w[:d] + items[j] @ w[d:] + params.weights["halve_b"], 0.0)


def assemble_pref_reprs(item_reprs: EmbeddingTable, graph: PrefGraph, params: ModelParams) -> EmbeddingTable:
    if len(item_reprs) != graph.n_items:
        raise ValueError("item embeddings missing for some preference endpoints")
    return EmbeddingTable("preference", pair_reprs(item_reprs.vectors, graph.pref_i, graph.pref_j, params))


def assemble_user_reprs(factorization: Factorization, user_sim: SimilarityGraph, pref_reprs: EmbeddingTable,
                        graph: PrefGraph, params: ModelParams) -> EmbeddingTable:
    """User vectors from similar users and from the user's own preferences."""
    fu = factorization.user_factors
    n = fu.shape[0]
    w = params.weights
    if pref_reprs.width != params.dims.embed or fu.shape[1] > pref_reprs.width:
        raise ValueError("preference width must equal d and be at least the NMF rank")
    a_u = normalized_adjacency(user_sim.weights, params.betas.get("user_sim", default_beta(user_sim.weights)))
    up = graph.user_pref_matrix()
    a_up = normalized_adjacency(bipartite_block(up), params.betas.get("user_pref", default_beta(up)))
    sim = np.maximum(np.asarray(a_u @ fu) @ w["theta_user_sim"], 0.0)
    pooled = np.asarray(a_up @ np.vstack([pad_to(fu, pref_reprs.width), pref_reprs.vectors]))[:n]
    from_prefs = np.maximum(pooled @ w["theta_user_pref"], 0.0)
    return EmbeddingTable("user", np.hstack([sim, from_prefs]))


def predict_weight(user_vecs, pref_vecs, params: ModelParams, mode: str = "eval", rng=None,
                   dropout=(0.0, 0.0)) -> np.ndarray:
    """Predicted user-preference weights for row-aligned user/preference vectors."""
    user_vecs = np.atleast_2d(np.asarray(user_vecs, dtype=np.float64))
    pref_vecs = np.atleast_2d(np.asarray(pref_vecs, dtype=np.float64))
    d = params.dims.embed
    if user_vecs.shape[1] != d or pref_vecs.shape[1] != d:
        raise ValueError(f"user and preference vectors must both have width {d}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    tape, p = _constants(params)
    x = tape.constant(np.hstack([user_vecs, pref_vecs]))
    out, _ = head_forward(p, x, params.dims, params.bn_stats, train=mode == "train", rng=rng,
                          dropout=dropout, frozen_bn=mode == "train")
    return out.value.ravel()


@dataclass(frozen=True, eq=False)
class Embeddings:
    """Everything needed to score arbitrary pairs for known users."""

    params: ModelParams
    items: np.ndarray
    users: np.ndarray
    k_min: int
    k_max: int

    def predict_pairs(self, user, i, j, chunk: int = 65536) -> np.ndarray:
        """``w_hat(user, p_ij)`` for canonical pairs, without materializing graph nodes.

        ``user`` is a single index or an array aligned with ``i`` and ``j``.
        """
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        w = self.params.weights
        d = self.params.dims.embed
        top = self.items @ w["halve_w"][:d]
        bot = self.items @ w["halve_w"][d:]
        w0 = w["head_w0"]
        user_part = self.users @ w0[:d] + w["head_b0"]
        per_pair = np.ndim(user) > 0
        if per_pair:
            user = np.asarray(user, dtype=np.int64)
        out = np.empty(len(i))
        for lo in range(0, len(i), chunk):
            sl = slice(lo, lo + chunk)
            prefs = np.maximum(top[i[sl]] + bot[j[sl]] + w["halve_b"], 0.0)
            h = prefs @ w0[d:] + (user_part[user[sl]] if per_pair else user_part[user])
            out[sl] = self._head_tail(np.maximum(h, 0.0))
        return out

    def _head_tail(self, h):
        w, bn = self.params.weights, self.params.bn_stats
        hidden = self.params.dims.hidden
        for k in range(len(hidden)):
            if k > 0:
                h = np.maximum(h @ w[f"head_w{k}"] + w[f"head_b{k}"], 0.0)
            h = (h - bn[f"mean{k}"]) / np.sqrt(bn[f"var{k}"] + 1e-5) * w[f"bn_gamma{k}"] + w[f"bn_beta{k}"]
        return (h @ w["head_out_w"] + w["head_out_b"]).ravel()


def embed(params: ModelParams, ops: GraphOperators, graph: PrefGraph) -> Embeddings:
    tape, p = _constants(params)
    items, _, users = forward(p, ops, params.dims, tape)
    return Embeddings(params, items.value, users.value, graph.k_min, graph.k_max)
