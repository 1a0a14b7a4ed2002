"""Top-N scoring from predicted pairwise preferences and NDCG evaluation.

An item's score is its average oriented preference against every other
candidate, normalized by the rating range::

    f(u, i) = sum_{j in C, j != i} clip(w_hat(u, i > j)) / ((k_max - k_min) (|C| - 1))

so ``f`` lies in ``[-1, 1]``.  ``w_hat(u, i > j)`` is the predicted weight of
the canonical pair node, negated when ``i`` is its second item.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import Split

_log = logging.getLogger(__name__)

DENOMINATORS = ("candidates", "rated")

# (user, i, j) -> predicted w(u, p_ij) for canonical i < j arrays
Predictor = Callable[[int, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ScoreRow:
    user: int
    items: np.ndarray
    scores: np.ndarray
    normalized: bool = True  # False for the rated-items denominator

    def __post_init__(self):
        if self.normalized and np.any(np.abs(self.scores) > 1 + 1e-9):
            raise ValueError("scores outside [-1, 1]")

    def as_dict(self) -> dict:
        return dict(zip(self.items.tolist(), self.scores.tolist()))


def score_items(user: int, candidates, predictor: Predictor, k_min: float, k_max: float,
                denominator: str = "candidates", n_rated: int | None = None) -> ScoreRow:
    """Score every candidate against all others for one user.

    ``denominator="rated"`` divides by ``n_rated - 1`` (the user's number of
    rated items) instead of ``|C| - 1``; scores are then not guaranteed to lie
    in ``[-1, 1]``.
    """
    items = np.unique(np.asarray(candidates, dtype=np.int64))
    if len(items) < 2:
        raise ValueError(f"need at least two candidates, got {len(items)}")
    if denominator not in DENOMINATORS:
        raise ValueError(f"denominator must be one of {DENOMINATORS}, got {denominator!r}")
    span = float(k_max - k_min)
    if span <= 0:
        raise ValueError("rating scale must have k_max > k_min")
    a, b = np.triu_indices(len(items), k=1)
    w = np.clip(np.asarray(predictor(user, items[a], items[b]), dtype=np.float64), -span, span)
    totals = np.bincount(a, weights=w, minlength=len(items)) - np.bincount(b, weights=w, minlength=len(items))
    if denominator == "candidates":
        count = len(items) - 1
    else:
        if n_rated is None or n_rated < 2:
            raise ValueError("the rated-items denominator needs n_rated >= 2")
        count = n_rated - 1
    return ScoreRow(user, items, totals / (span * count), normalized=denominator == "candidates")


def recommend_top_n(scores: ScoreRow, n: int) -> np.ndarray:
    """Candidates by descending score, ties to the smaller item index, cut at ``n``."""
    if n < 1:
        raise ValueError("N must be >= 1")
    order = np.lexsort((scores.items, -scores.scores))
    return scores.items[order[:n]]


def ndcg_at_n(recommended, test_ratings: dict, n: int, base: float = 2.0) -> float:
    """NDCG@n with gain ``2^r - 1``; items missing from ``test_ratings`` gain 0."""
    if n < 1:
        raise ValueError("N must be >= 1")
    if not test_ratings:
        raise ValueError("user has no test ratings")
    rec = list(recommended)[:n]
    gains = np.array([2.0 ** test_ratings.get(int(i), 0.0) - 1.0 for i in rec])
    ideal = np.sort(2.0 ** np.fromiter(test_ratings.values(), dtype=np.float64) - 1.0)[::-1][:n]
    log = np.log(base)
    dcg = float(np.sum(gains / (np.log(np.arange(2, len(gains) + 2)) / log)))
    idcg = float(np.sum(ideal / (np.log(np.arange(2, len(ideal) + 2)) / log)))
    return dcg / idcg if idcg > 0 else 0.0


@dataclass(frozen=True, eq=False)
class RunResult:
    upl: int
    variant: str
    seed: int
    ndcg: dict  # N -> mean NDCG@N
    per_user: dict = field(default_factory=dict)  # N -> array aligned with users
    users: np.ndarray = field(default_factory=lambda: np.array([], dtype=int))
    seconds: float = 0.0

    def __post_init__(self):
        for n, v in self.ndcg.items():
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise ValueError(f"NDCG@{n} = {v} outside [0, 1]")


def evaluate(split: Split, predictor: Predictor, ns: Sequence[int] = (5, 10), *, variant: str = "",
             denominator: str = "candidates", k_min=None, k_max=None) -> RunResult:
    """Rank each user's test items and average NDCG@N over users (ascending user order)."""
    start = time.perf_counter()
    test = split.test
    k_min = test.k_min if k_min is None else k_min
    k_max = test.k_max if k_max is None else k_max
    train_counts = split.train.user_counts()
    users = test.active_users()
    per_user = {n: np.empty(len(users)) for n in ns}
    for row, u in enumerate(users):
        items, ratings = test.user_items(int(u))
        truth = dict(zip(items.tolist(), ratings.tolist()))
        if len(items) == 1:
            ranked = items
        else:
            s = score_items(int(u), items, predictor, k_min, k_max, denominator, int(train_counts[u]))
            ranked = recommend_top_n(s, max(ns))
        for n in ns:
            per_user[n][row] = ndcg_at_n(ranked, truth, n)
    means = {n: float(per_user[n].mean()) for n in ns}
    _log.info("evaluated %d users: %s", len(users), ", ".join(f"NDCG@{n}={v:.4f}" for n, v in means.items()))
    return RunResult(split.upl, variant, split.seed, means, per_user, users, time.perf_counter() - start)


@dataclass(frozen=True)
class Summary:
    upl: int
    variant: str
    n: int
    mean: float
    std: float
    runs: int


def aggregate_runs(results: Sequence[RunResult]) -> list[Summary]:
    """Mean and population standard deviation per (upl, variant, N).

    Uses exactly rounded statistics, so identical runs give a std of exactly 0.
    """
    if not results:
        raise ValueError("no runs to aggregate")
    groups: dict = {}
    for r in results:
        for n, v in r.ndcg.items():
            groups.setdefault((r.upl, r.variant, n), []).append(v)
    return [Summary(upl, variant, n, statistics.fmean(v), statistics.pstdev(v), len(v))
            for (upl, variant, n), v in sorted(groups.items())]
