import os
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
ML100K = Path(os.environ.get("PGREC_ML100K", ROOT / "data" / "ml-100k"))


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (modified in place, restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def random_weighted_graph(rng, n, density=0.5, signed=False, connected=False):
    """Dense symmetric weight matrix with zero diagonal."""
    while True:
        mask = np.triu(rng.random((n, n)) < density, 1)
        w = rng.uniform(0.5, 3.0, size=(n, n))
        if signed:
            w *= rng.choice([-1.0, 1.0], size=(n, n))
        w = np.where(mask, w, 0.0)
        w = w + w.T
        if not connected:
            return w
        from scipy.sparse.csgraph import connected_components

        if connected_components(w != 0, directed=False)[0] == 1:
            return w


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def ml100k_path():
    if not (ML100K / "u.data").exists():
        pytest.skip(f"ML-100K not found at {ML100K}; run scripts/fetch_ml100k.py")
    return ML100K


def toy_instance(seed=0, n_users=5, n_items=6, rank=4, density=0.8):
    """Small rated store with its PrefGraph, co-rating graphs and NMF factors."""
    from pgrec.dataset import RatingStore
    from pgrec.nmf import nmf_factorize
    from pgrec.prefgraph import NodeKind, build_corating_similarity, build_pref_graph

    rng = np.random.default_rng(seed)
    mask = rng.random((n_users, n_items)) < density
    mask[:, :2] = True  # every user has at least two ratings
    u, i = np.nonzero(mask)
    store = RatingStore(u, i, rng.integers(1, 6, size=len(u)).astype(float), n_users, n_items)
    graph = build_pref_graph(store)
    fac = nmf_factorize(store, rank, max_iters=50, seed=seed)
    return (graph, fac, build_corating_similarity(store, NodeKind.USER),
            build_corating_similarity(store, NodeKind.ITEM), store)


def dense_propagation(w, h, theta, beta):
    """Direct dense evaluation of relu(D^-1/2 (W + beta I) D^-1/2 H theta) with |.| degrees."""
    wt = np.asarray(w, dtype=float) + beta * np.eye(len(w))
    dinv = np.diag(1.0 / np.sqrt(np.abs(wt).sum(axis=1)))
    return np.maximum(dinv @ wt @ dinv @ h @ theta, 0.0)


# --- acceptance report -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion, printed in the terminal summary."""

    def record(number: int, title: str, ok: bool, detail: str = ""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
