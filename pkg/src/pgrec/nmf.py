"""Non-negative factorization of the observed rating entries.

Unknown ratings are excluded from the objective instead of being read as
zeros.  With the 0/1 observation mask ``M`` the multiplicative updates are the
weighted Lee-Seung rules::

    Fu <- Fu * (R Fi^T) / ((M o Fu Fi) Fi^T + eps)
    Fi <- Fi * (Fu^T R) / (Fu^T (M o Fu Fi) + eps)

Products with ``M o Fu Fi`` are only ever evaluated at observed positions, so
the cost per sweep is ``O(nnz * f)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dataset import RatingStore

_log = logging.getLogger(__name__)

EPS = 1e-9


@dataclass(frozen=True, eq=False)
class Factorization:
    user_factors: np.ndarray  # n x f
    item_factors: np.ndarray  # f x m
    losses: tuple = ()

    def __post_init__(self):
        if self.user_factors.shape[1] != self.item_factors.shape[0]:
            raise ValueError("factor ranks disagree")
        if (self.user_factors < 0).any() or (self.item_factors < 0).any():
            raise ValueError("factors must be non-negative")

    @property
    def rank(self) -> int:
        return self.user_factors.shape[1]


def observed_loss(rows, cols, values, fu, fi) -> float:
    pred = np.einsum("kf,fk->k", fu[rows], fi[:, cols])
    return float(np.sum((values - pred) ** 2))


def nmf_factorize(
    train: RatingStore,
    f: int,
    max_iters: int = 200,
    tol: float = 1e-6,
    seed: int = 0,
    callback=None,
) -> Factorization:
    """Factorize ``train.matrix`` as ``Fu @ Fi`` over its observed entries.

    Stops after ``max_iters`` sweeps or once the relative decrease of the
    observed squared loss falls below ``tol``.  ``callback(it, fu, fi, loss)``
    runs after every sweep, which the tests use to watch monotonicity.
    """
    n, m = train.n_users, train.n_items
    if f < 1 or f > min(n, m):
        raise ValueError(f"rank {f} must be in [1, min(n, m) = {min(n, m)}]")
    if len(train) == 0:
        raise ValueError("empty training store")

    r = train.matrix.tocsr()
    r.sort_indices()
    coo = r.tocoo()
    rows, cols, vals = coo.row, coo.col, coo.data
    rt = r.T.tocsr()

    rng = np.random.default_rng(seed)
    # uniform on (0, 1]
    fu = 1.0 - rng.random((n, f))
    fi = 1.0 - rng.random((f, m))

    loss = observed_loss(rows, cols, vals, fu, fi)
    losses = [loss]
    for it in range(1, max_iters + 1):
        pred = sp.csr_matrix((np.einsum("kf,fk->k", fu[rows], fi[:, cols]), (rows, cols)), shape=(n, m))
        fu *= np.asarray(r @ fi.T) / (np.asarray(pred @ fi.T) + EPS)
        pred = sp.csr_matrix((np.einsum("kf,fk->k", fu[rows], fi[:, cols]), (rows, cols)), shape=(n, m))
        fi *= np.asarray(rt @ fu).T / (np.asarray(pred.T @ fu).T + EPS)

        new = observed_loss(rows, cols, vals, fu, fi)
        losses.append(new)
        if callback is not None:
            callback(it, fu, fi, new)
        improvement = (loss - new) / max(loss, 1e-300)
        loss = new
        if improvement < tol:
            break
    _log.info("nmf rank %d: %d sweeps, observed RMSE %.4f", f, it, np.sqrt(loss / len(vals)))
    return Factorization(fu, fi, tuple(losses))
