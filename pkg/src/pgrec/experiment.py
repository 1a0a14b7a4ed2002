"""Pipeline wiring: split, graphs, NMF, training and evaluation for each run."""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .dataset import RatingStore, Split, parse_movielens, weak_generalization_split
from .model import build_operators, embed, train
from .nmf import Factorization, nmf_factorize
from .prefgraph import (
    NodeKind,
    PrefGraph,
    SimilarityGraph,
    build_content_similarity,
    build_corating_similarity,
    build_pref_graph,
    recursive_spectral_clustering,
    sparsify,
)
from .ranking import RunResult, aggregate_runs, evaluate

_log = logging.getLogger(__name__)

RESULTS_FILE = "results.csv"
SUMMARY_FILE = "summary.csv"
TIMING_COLUMNS = ("train_seconds", "eval_seconds")


@dataclass(frozen=True, eq=False)
class Dataset:
    store: RatingStore
    users: list
    items: list


@dataclass(frozen=True, eq=False)
class RunInputs:
    split: Split
    graph: PrefGraph
    user_sim: SimilarityGraph
    item_sim: SimilarityGraph
    factorization: Factorization


@dataclass(frozen=True, eq=False)
class RunRecord:
    variant: str
    upl: int
    run: int
    seed: int
    result: RunResult
    train_seconds: float
    eval_seconds: float


def load_dataset(config: ExperimentConfig) -> Dataset:
    store, users, items = parse_movielens(config.dataset.path, config.dataset.flavor)
    return Dataset(store, users, items)


def run_seeds(seed: int) -> dict:
    """Independent sub-seeds for each stochastic stage of one run."""
    split, nmf, cluster, fit = np.random.SeedSequence(seed).generate_state(4)
    return {"split": int(split), "nmf": int(nmf), "cluster": int(cluster), "train": int(fit)}


def subsample_users(store: RatingStore, k: int, min_ratings: int, seed: int) -> RatingStore:
    """Keep ``k`` random users among those with at least ``min_ratings`` ratings."""
    eligible = np.flatnonzero(store.user_counts() >= min_ratings)
    if k >= len(eligible):
        return store
    keep = np.zeros(store.n_users, dtype=bool)
    keep[np.random.default_rng(seed).choice(eligible, size=k, replace=False)] = True
    _log.info("subsampled %d of %d eligible users", k, len(eligible))
    return store.subset(keep[store.users])


def similarity_graphs(variant: str, data: Dataset, train_store: RatingStore, config: ExperimentConfig,
                      seed: int) -> tuple[SimilarityGraph, SimilarityGraph]:
    n, m = train_store.n_users, train_store.n_items
    if variant == "simple":
        return SimilarityGraph.empty(NodeKind.USER, n), SimilarityGraph.empty(NodeKind.ITEM, m)
    if variant == "corating":
        graphs = (build_corating_similarity(train_store, NodeKind.USER),
                  build_corating_similarity(train_store, NodeKind.ITEM))
    elif variant == "content":
        graphs = build_content_similarity(data.users), build_content_similarity(data.items)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    out = []
    for g, c in zip(graphs, (config.model.user_clusters, config.model.item_clusters)):
        clusters = recursive_spectral_clustering(g, min(c, g.n_nodes), seed=seed)
        sparse = sparsify(g, clusters)
        _log.info("%s similarity: %d -> %d edges in %d clusters", g.kind.value, g.n_edges, sparse.n_edges,
                  clusters.c)
        out.append(sparse)
    return tuple(out)


def prepare_run(config: ExperimentConfig, data: Dataset, upl: int, seed: int) -> RunInputs:
    seeds = run_seeds(seed)
    store = data.store
    if config.dataset.subsample_users:
        store = subsample_users(store, config.dataset.subsample_users, upl + config.protocol.n_eval, seeds["split"])
    split = weak_generalization_split(store, upl, config.protocol.n_eval, seeds["split"])
    graph = build_pref_graph(split.train, include_ties=config.model.include_ties)
    user_sim, item_sim = similarity_graphs(config.variant, data, split.train, config, seeds["cluster"])
    fac = nmf_factorize(split.train, config.model.rank, config.model.nmf_iters, config.model.nmf_tol, seeds["nmf"])
    return RunInputs(split, graph, user_sim, item_sim, fac)


def _betas(config: ExperimentConfig):
    b = config.model.beta
    return None if b is None else {k: b for k in ("item_sim", "item_user", "user_sim", "user_pref")}


def execute_run(config: ExperimentConfig, data: Dataset, upl: int, run: int, seed: int,
                init_checkpoint=None, checkpoint_dir=None) -> RunRecord:
    t0 = time.perf_counter()
    inputs = prepare_run(config, data, upl, seed)
    init = None
    if init_checkpoint is not None:
        init = load_checkpoint(init_checkpoint, expected_hash=config.config_hash()).params
    fit = train(inputs.graph, inputs.user_sim, inputs.item_sim, inputs.factorization, config.training,
                seed=run_seeds(seed)["train"], init=init, dims=config.dims, betas=_betas(config))
    train_seconds = time.perf_counter() - t0
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / f"{config.variant}_upl{upl}_run{run}.npz", fit.params,
                        config_hash=config.config_hash(), seed=seed, adam=fit.adam)

    t1 = time.perf_counter()
    ops = build_operators(inputs.graph, inputs.factorization, inputs.user_sim, inputs.item_sim,
                          betas=fit.params.betas, embed=config.model.embed)
    emb = embed(fit.params, ops, inputs.graph)
    result = evaluate(inputs.split, emb.predict_pairs, config.protocol.topn, variant=config.variant,
                      denominator=config.protocol.denominator)
    return RunRecord(config.variant, upl, run, seed, result, train_seconds, time.perf_counter() - t1)


def _header(topn) -> list[str]:
    return ["variant", "upl", "run", "seed", *[f"ndcg{n}" for n in topn], *TIMING_COLUMNS]


def _row(rec: RunRecord, topn) -> list[str]:
    return [rec.variant, str(rec.upl), str(rec.run), str(rec.seed),
            *[repr(rec.result.ndcg[n]) for n in topn],
            f"{rec.train_seconds:.3f}", f"{rec.eval_seconds:.3f}"]


def _append(path: Path, rows, header):
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _job(args):
    config, data, upl, run, seed, init_checkpoint, checkpoint_dir = args
    return execute_run(config, data, upl, run, seed, init_checkpoint, checkpoint_dir)


def run_experiment(config: ExperimentConfig, *, data: Dataset | None = None, jobs: int = 1,
                   init_checkpoint=None, save_checkpoints: bool = False) -> Path:
    """Run every (upl, run) pair of ``config``; returns the results file path.

    Rows are appended as runs finish, so a failing run leaves the earlier
    records in place.  With ``jobs > 1`` runs execute in worker processes and
    rows are written in (upl, run) order once all have finished.
    """
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))
    data = data or load_dataset(config)
    topn = tuple(config.protocol.topn)
    results_path = out / RESULTS_FILE
    ckpt_dir = out / "checkpoints" if save_checkpoints else None
    tasks = [(config, data, upl, run, seed, init_checkpoint, ckpt_dir)
             for upl in config.protocol.upl for run, seed in enumerate(config.seeds)]

    records = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_job, tasks))
        records.sort(key=lambda r: (r.variant, r.upl, r.run))
        _append(results_path, [_row(r, topn) for r in records], _header(topn))
    else:
        for task in tasks:
            rec = _job(task)
            _log.info("%s upl=%d run=%d seed=%d: %s", rec.variant, rec.upl, rec.run, rec.seed,
                      ", ".join(f"NDCG@{n}={v:.4f}" for n, v in rec.result.ndcg.items()))
            _append(results_path, [_row(rec, topn)], _header(topn))
            records.append(rec)

    with open(out / SUMMARY_FILE, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "upl", "n", "mean", "std", "runs"])
        for s in aggregate_runs([r.result for r in records]):
            writer.writerow([s.variant, s.upl, s.n, repr(s.mean), repr(s.std), s.runs])
    return results_path


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def results_body(path, drop_timing: bool = True) -> str:
    """Results file text with timing columns blanked, for reproducibility checks."""
    rows = read_results(path)
    if drop_timing:
        for row in rows:
            for col in TIMING_COLUMNS:
                row[col] = ""
    lines = [",".join(rows[0].keys())] if rows else []
    lines += [",".join(r.values()) for r in rows]
    return "\n".join(lines) + "\n"
