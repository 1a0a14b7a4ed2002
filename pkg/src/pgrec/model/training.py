"""End-to-end optimization of the embedding branches and the head.

Phase 1 runs k-fold pretraining: each fold hides a disjoint slice of the
user-preference edges (from the loss *and* from propagation into users) and
early-stops on its validation RMSE.  The parameters of the best fold seed
phase 2, which trains on every edge with a fresh optimizer.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..nmf import Factorization
from ..numerics import AdamState, adam_step, backward
from ..prefgraph import PrefGraph, SimilarityGraph
from .network import (
    Dimensions,
    ModelParams,
    batch_loss,
    build_operators,
    embed,
    init_params,
)

_log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    l2: float = 0.0055
    dropout: tuple = (0.4, 0.8)
    batch_size: int = 1024
    epochs: int = 30
    patience: int = 5
    folds: int = 5
    bn_momentum: float = 0.9
    pretrain: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.l2 < 0:
            raise ValueError("lr must be positive and l2 non-negative")
        if any(not 0.0 <= r < 1.0 for r in self.dropout):
            raise ValueError(f"dropout rates must lie in [0, 1), got {self.dropout}")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 1:
            raise ValueError("batch_size and patience must be >= 1, epochs >= 0")
        if self.folds < 1:
            raise ValueError("folds must be >= 1")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise ValueError("bn_momentum must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class EpochRecord:
    phase: str  # "fold<k>" or "full"
    epoch: int
    loss: float  # mean over batches of RMSE + L2 penalty
    rmse: float  # mean over batches of the RMSE term alone
    val_rmse: float | None = None


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)
    fold_scores: tuple = ()
    best_fold: int | None = None
    adam: AdamState | None = None
    seconds: float = 0.0

    def curve(self, phase="full", key="loss"):
        return [getattr(r, key) for r in self.history if r.phase == phase]


def _update_running(bn_stats, batch_stats, momentum):
    if not batch_stats:
        return bn_stats
    return {k: momentum * v + (1.0 - momentum) * batch_stats[k] for k, v in bn_stats.items()}


def validation_rmse(params, ops, graph: PrefGraph, edges) -> float:
    emb = embed(params, ops, graph)
    p = graph.up_pref[edges]
    pred = emb.predict_pairs(graph.up_user[edges], graph.pref_i[p], graph.pref_j[p])
    return float(np.sqrt(np.mean((pred - graph.up_weight[edges]) ** 2)))


def _run_phase(params, ops, graph, train_edges, val_edges, config, rng, phase, history,
               early_stop: bool, epochs: int):
    """Train on ``train_edges``; returns (params, adam state, best validation RMSE)."""
    adam = AdamState(lr=config.lr)
    best_params, best_val, stale = params, math.inf, 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(train_edges)
        losses, rmses = [], []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            tape, loss, rmse, stats = batch_loss(
                params, ops, graph.up_user[batch], graph.up_pref[batch], graph.up_weight[batch],
                l2=config.l2, train=True, rng=rng, dropout=config.dropout,
            )
            value = float(loss.value)
            if not math.isfinite(value):
                raise DivergenceError(f"{phase}: loss became {value} in epoch {epoch}", epoch)
            grads = backward(tape, loss)
            tape.clear()
            weights, adam = adam_step(params.weights, grads, adam)
            params = params.with_weights(weights, _update_running(params.bn_stats, stats, config.bn_momentum))
            losses.append(value)
            rmses.append(rmse)
        val = validation_rmse(params, ops, graph, val_edges) if len(val_edges) else None
        history.append(EpochRecord(phase, epoch, float(np.mean(losses)), float(np.mean(rmses)), val))
        _log.info("%s epoch %d loss %.4f rmse %.4f val %s", phase, epoch, history[-1].loss,
                  history[-1].rmse, "-" if val is None else f"{val:.4f}")
        if not early_stop or val is None:
            continue
        if val < best_val:
            best_params, best_val, stale = params, val, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    if early_stop and val_edges is not None and len(val_edges):
        return best_params, adam, best_val
    return params, adam, best_val


def train(
    graph: PrefGraph,
    user_sim: SimilarityGraph,
    item_sim: SimilarityGraph,
    factorization: Factorization,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    init: ModelParams | None = None,
    dims: Dimensions | None = None,
    betas: dict | None = None,
) -> TrainResult:
    """Fit the model to the observed user-preference weights of ``graph``."""
    n_edges = len(graph.up_weight)
    if n_edges == 0:
        raise ValueError("graph has no user-preference edges to train on")
    if dims is None:
        dims = init.dims if init is not None else Dimensions(factorization.rank, factorization.rank)
    if factorization.rank != dims.rank:
        raise ValueError(f"factorization rank {factorization.rank} != configured rank {dims.rank}")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(dims, seed=int(rng.integers(2**31)))
    full_ops = build_operators(graph, factorization, user_sim, item_sim, betas=betas or params.betas,
                               embed=dims.embed)
    params = ModelParams(params.dims, params.weights, params.bn_stats, full_ops.betas)
    if config.epochs == 0:
        return TrainResult(params, seconds=time.perf_counter() - start)

    history, fold_scores, best_fold = [], [], None
    if config.pretrain and config.folds > 1:
        perm = rng.permutation(n_edges)
        candidates = []
        for k in range(config.folds):
            val = np.sort(perm[k::config.folds])
            mask = np.ones(n_edges, dtype=bool)
            mask[val] = False
            ops = build_operators(graph, factorization, user_sim, item_sim, edge_mask=mask,
                                  betas=params.betas, embed=dims.embed)
            fitted, _, score = _run_phase(params, ops, graph, np.flatnonzero(mask), val, config, rng,
                                          f"fold{k}", history, early_stop=True, epochs=config.epochs)
            fold_scores.append(score)
            candidates.append(fitted)
        best_fold = int(np.argmin(fold_scores))
        params = candidates[best_fold]
        _log.info("pretraining folds %s; initializing from fold %d",
                  ", ".join(f"{s:.4f}" for s in fold_scores), best_fold)

    params, adam, _ = _run_phase(params, full_ops, graph, np.arange(n_edges), np.array([], dtype=int),
                                 config, rng, "full", history, early_stop=False, epochs=config.epochs)
    return TrainResult(params, history, tuple(fold_scores), best_fold, adam, time.perf_counter() - start)
