"""Preference graph construction and similarity-graph sparsification.

A preference node stands for an unordered item pair ``{i, j}`` stored in
canonical order ``i < j``.  It is incident to item ``i`` with weight +1 and to
item ``j`` with weight -1, and every user who rated both items attaches to it
with weight ``r_ui - r_uj``.  Preference nodes are global: all users who
compared the same two items share one node.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .dataset import ItemProfile, RatingStore, UserProfile
from .numerics.eigen import fiedler_vector, laplacian

_log = logging.getLogger(__name__)


class NodeKind(enum.Enum):
    USER = "User"
    ITEM = "Item"
    PREFERENCE = "Preference"
    CONTENT = "Content"


class NodeId(NamedTuple):
    kind: NodeKind
    index: int


def canonical_pairs(items: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(a, b)`` with ``a < b`` over a sorted item array."""
    a, b = np.triu_indices(len(items), k=1)
    return a, b


@dataclass(frozen=True, eq=False)
class PrefGraph:
    """Typed weighted graph over users, items, preferences and content."""

    n_users: int
    n_items: int
    k_min: int
    k_max: int
    # user-item edges, weight r_ui
    ui_user: np.ndarray
    ui_item: np.ndarray
    ui_weight: np.ndarray
    # preference nodes, canonical pair (pref_i < pref_j)
    pref_i: np.ndarray
    pref_j: np.ndarray
    # user-preference edges, weight r_ui - r_uj
    up_user: np.ndarray
    up_pref: np.ndarray
    up_weight: np.ndarray
    # content incidences (None unless built with content)
    content_names: tuple = ()
    user_content: sp.csr_matrix | None = field(default=None, repr=False)
    item_content: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_prefs(self) -> int:
        return len(self.pref_i)

    @property
    def scale(self) -> float:
        return float(self.k_max - self.k_min)

    @cached_property
    def _pref_keys(self) -> np.ndarray:
        return self.pref_i * self.n_items + self.pref_j

    def pref_index(self, i, j) -> np.ndarray:
        """Preference-node index of canonical pairs ``i < j``; -1 where absent."""
        keys = np.asarray(i, dtype=np.int64) * self.n_items + np.asarray(j, dtype=np.int64)
        if self.n_prefs == 0:
            return np.full(keys.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(self._pref_keys, keys), self.n_prefs - 1)
        return np.where(self._pref_keys[pos] == keys, pos, -1)

    def pref_item_incidence(self) -> sp.csr_matrix:
        """``n_prefs x n_items`` matrix holding +1 at ``i`` and -1 at ``j``."""
        p = np.arange(self.n_prefs)
        return sp.csr_matrix(
            (np.r_[np.ones(self.n_prefs), -np.ones(self.n_prefs)],
             (np.r_[p, p], np.r_[self.pref_i, self.pref_j])),
            shape=(self.n_prefs, self.n_items),
        )

    def user_pref_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.up_weight, (self.up_user, self.up_pref)), shape=(self.n_users, self.n_prefs)
        )

    def user_item_matrix(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.ui_weight, (self.ui_user, self.ui_item)), shape=(self.n_users, self.n_items)
        )

    def weight(self, user: int, a: int, b: int) -> float:
        """Stored preference of ``user`` for ``a`` over ``b``, in either order."""
        lo, hi = (a, b) if a < b else (b, a)
        p = int(self.pref_index(lo, hi))
        hit = np.flatnonzero((self.up_user == user) & (self.up_pref == p)) if p >= 0 else []
        if len(hit) == 0:
            raise KeyError(f"user {user} has no preference between items {a} and {b}")
        w = float(self.up_weight[hit[0]])
        return w if a < b else -w

    def edges(self):
        """Yield ``(NodeId, NodeId, weight)`` for every edge, grouped by type."""
        U, I, P, C = NodeKind.USER, NodeKind.ITEM, NodeKind.PREFERENCE, NodeKind.CONTENT
        for u, i, w in zip(self.ui_user, self.ui_item, self.ui_weight):
            yield NodeId(U, int(u)), NodeId(I, int(i)), float(w)
        for p, (i, j) in enumerate(zip(self.pref_i, self.pref_j)):
            yield NodeId(P, p), NodeId(I, int(i)), 1.0
            yield NodeId(P, p), NodeId(I, int(j)), -1.0
        for u, p, w in zip(self.up_user, self.up_pref, self.up_weight):
            yield NodeId(U, int(u)), NodeId(P, int(p)), float(w)
        for kind, inc in ((U, self.user_content), (I, self.item_content)):
            if inc is None:
                continue
            coo = inc.tocoo()
            for r, c in zip(coo.row, coo.col):
                yield NodeId(kind, int(r)), NodeId(C, int(c)), 1.0


def build_pref_graph(
    train: RatingStore,
    users: Sequence[UserProfile] | None = None,
    items: Sequence[ItemProfile] | None = None,
    with_content: bool = False,
    include_ties: bool = True,
) -> PrefGraph:
    """Build the preference graph of a training store.

    One user-preference edge is created for every pair of items a user rated
    (ties too, with weight 0, unless ``include_ties`` is false).
    """
    if len(train) == 0:
        raise ValueError("cannot build a preference graph from an empty store")
    m = train.n_items
    keys, owners, weights = [], [], []
    for u in train.active_users():
        its, rs = train.user_items(u)
        a, b = canonical_pairs(its)
        w = rs[a] - rs[b]
        if not include_ties:
            keep = w != 0
            a, b, w = a[keep], b[keep], w[keep]
        keys.append(its[a] * m + its[b])
        owners.append(np.full(len(a), u, dtype=np.int64))
        weights.append(w)
    keys = np.concatenate(keys) if keys else np.zeros(0, dtype=np.int64)
    uniq, inverse = np.unique(keys, return_inverse=True)

    graph = dict(
        n_users=train.n_users, n_items=m, k_min=train.k_min, k_max=train.k_max,
        ui_user=train.users.copy(), ui_item=train.items.copy(), ui_weight=train.ratings.copy(),
        pref_i=uniq // m, pref_j=uniq % m,
        up_user=np.concatenate(owners) if owners else np.zeros(0, dtype=np.int64),
        up_pref=inverse.astype(np.int64),
        up_weight=np.concatenate(weights) if weights else np.zeros(0),
    )
    if with_content:
        if users is None or items is None:
            raise ValueError("content nodes need user and item profiles")
        vocab, user_inc, item_inc = _content_incidence(users, items)
        graph.update(content_names=vocab, user_content=user_inc, item_content=item_inc)
    g = PrefGraph(**graph)
    _log.info("preference graph: %d prefs, %d user-pref edges", g.n_prefs, len(g.up_pref))
    return g


def _content_incidence(users, items):
    vocab: dict[str, int] = {}
    mats = []
    for profiles in (users, items):
        rows, cols = [], []
        for k, prof in enumerate(profiles):
            for attr in prof.attributes():
                rows.append(k)
                cols.append(vocab.setdefault(attr, len(vocab)))
        mats.append((rows, cols, len(profiles)))
    out = [
        sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, len(vocab)))
        for r, c, n in mats
    ]
    return tuple(vocab), out[0], out[1]


@dataclass(frozen=True, eq=False)
class SimilarityGraph:
    """Undirected intra-type graph with positive integer-valued weights."""

    kind: NodeKind
    weights: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_edges(self) -> int:
        return self.weights.nnz // 2

    def max_weight(self) -> float:
        return float(self.weights.max()) if self.weights.nnz else 0.0

    @classmethod
    def empty(cls, kind: NodeKind, n: int) -> "SimilarityGraph":
        return cls(kind, sp.csr_matrix((n, n)))

    def edges(self):
        coo = sp.triu(self.weights, k=1).tocoo()
        for a, b, w in zip(coo.row, coo.col, coo.data):
            yield NodeId(self.kind, int(a)), NodeId(self.kind, int(b)), float(w)


def _similarity(incidence: sp.spmatrix, kind: NodeKind) -> SimilarityGraph:
    inc = sp.csr_matrix(incidence, dtype=np.float64)
    w = (inc @ inc.T).tocsr()
    w.setdiag(0.0)
    w.eliminate_zeros()
    w.sort_indices()
    return SimilarityGraph(kind, w)


def build_content_similarity(profiles: Sequence[UserProfile] | Sequence[ItemProfile]) -> SimilarityGraph:
    """Weight = number of shared content attributes (UCU / ICI meta-path count)."""
    if not profiles:
        raise ValueError("no profiles given")
    kind = NodeKind.USER if isinstance(profiles[0], UserProfile) else NodeKind.ITEM
    vocab: dict[str, int] = {}
    rows, cols = [], []
    for k, prof in enumerate(profiles):
        for attr in set(prof.attributes()):
            rows.append(k)
            cols.append(vocab.setdefault(attr, len(vocab)))
    inc = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(profiles), max(len(vocab), 1)))
    return _similarity(inc, kind)


def build_corating_similarity(train: RatingStore, kind: NodeKind) -> SimilarityGraph:
    """Weight = number of co-rated items (users) or co-rating users (items)."""
    if len(train) == 0:
        raise ValueError("empty training store")
    binary = train.matrix.copy()
    binary.data[:] = 1.0
    if kind is NodeKind.USER:
        return _similarity(binary, kind)
    if kind is NodeKind.ITEM:
        return _similarity(binary.T, kind)
    raise ValueError(f"co-rating similarity is defined for users or items, not {kind}")


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    labels: np.ndarray
    c: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if len(labels) and set(np.unique(labels)) != set(range(self.c)):
            raise ValueError("cluster labels must be contiguous 0..c-1")


def _relabel(labels: np.ndarray) -> np.ndarray:
    # clusters numbered by their smallest member
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty(len(order), dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[np.unique(labels, return_inverse=True)[1]]


def recursive_spectral_clustering(graph: SimilarityGraph, c: int, seed: int = 0) -> ClusterAssignment:
    """Split clusters by the sign of their Fiedler vector until ``c`` exist.

    Connected components form the initial clusters.  The largest splittable
    cluster (ties: smallest label) is split next; nodes with ``v2 > 0`` form
    one side, everything else the other.  Singletons, edgeless clusters and
    clusters whose split would leave one side empty are never split.
    """
    n = graph.n_nodes
    if c < 1 or c > n:
        raise ValueError(f"cluster count must be in [1, {n}], got {c}")
    w = graph.weights
    if c == 1:
        return ClusterAssignment(np.zeros(n, dtype=np.int64), 1)

    _, labels = connected_components(w, directed=False)
    labels = _relabel(labels)
    n_clusters = int(labels.max()) + 1
    blocked: set[int] = set()
    while n_clusters < c:
        sizes = np.bincount(labels, minlength=n_clusters)
        candidates = [k for k in np.argsort(-sizes, kind="stable") if k not in blocked]
        if not candidates:
            _log.warning("only %d of %d clusters could be formed", n_clusters, c)
            break
        k = int(candidates[0])
        members = np.flatnonzero(labels == k)
        sub = w[members][:, members]
        if len(members) < 2 or sub.nnz == 0:
            blocked.add(k)
            continue
        _, v2 = fiedler_vector(laplacian(sub), seed=seed)
        positive = v2 > 0
        if positive.all() or not positive.any():
            blocked.add(k)
            continue
        labels[members[~positive]] = n_clusters
        n_clusters += 1
    labels = _relabel(labels)
    return ClusterAssignment(labels, int(labels.max()) + 1)


def sparsify(graph: SimilarityGraph, clusters: ClusterAssignment) -> SimilarityGraph:
    """Keep only edges whose endpoints share a cluster label."""
    labels = np.asarray(clusters.labels)
    if len(labels) != graph.n_nodes:
        raise ValueError(f"assignment covers {len(labels)} nodes, graph has {graph.n_nodes}")
    coo = graph.weights.tocoo()
    keep = labels[coo.row] == labels[coo.col]
    w = sp.csr_matrix((coo.data[keep], (coo.row[keep], coo.col[keep])), shape=graph.weights.shape)
    w.sort_indices()
    return SimilarityGraph(graph.kind, w)


def dump_edge_list(graph, fh) -> int:
    """Write ``kind index kind index weight`` lines; returns the edge count."""
    count = 0
    for a, b, w in graph.edges():
        fh.write(f"{a.kind.value} {a.index} {b.kind.value} {b.index} {w:g}\n")
        count += 1
    return count
