"""Second-smallest Laplacian eigenpair via Lanczos on the complement of 1.

A graph Laplacian always has the constant vector in its null space.  Running
Lanczos on the subspace orthogonal to it turns the Fiedler pair into the
*smallest* eigenpair of the restricted operator, so no shift is needed and no
dense decomposition of the full matrix is ever formed.  Full
reorthogonalization keeps the Krylov basis honest; once the basis spans the
whole complement the tridiagonal eigenpair is exact.
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh_tridiagonal

_log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


def laplacian(weights: sp.spmatrix) -> sp.csr_matrix:
    """Combinatorial Laplacian D - W of a symmetric weight matrix."""
    weights = sp.csr_matrix(weights, dtype=np.float64)
    deg = np.asarray(weights.sum(axis=1)).ravel()
    return (sp.diags(deg) - weights).tocsr()


def _check_symmetric(mat):
    if mat.shape[0] != mat.shape[1]:
        raise ValueError(f"Laplacian must be square, got {mat.shape}")
    if sp.issparse(mat):
        diff = abs(mat - mat.T)
        asym = diff.max() if diff.nnz else 0.0
        scale = abs(mat).max() if mat.nnz else 0.0
    else:
        asym = np.abs(mat - mat.T).max()
        scale = np.abs(mat).max()
    if asym > 1e-12 * max(scale, 1.0):
        raise ValueError(f"Laplacian is not symmetric (max asymmetry {asym:.3e})")
    return scale


def fiedler_vector(
    lap,
    *,
    tol: float = 1e-12,
    max_krylov: int = 400,
    max_restarts: int = 50,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Return ``(lambda_2, v_2)`` for a symmetric graph Laplacian.

    ``v_2`` has unit norm, is orthogonal to the all-ones vector, and is
    sign-normalized so that its largest-magnitude entry is positive.

    Raises :class:`ConvergenceError` if the residual ``||L v - lambda v||``
    has not dropped below ``tol * ||L||`` after ``max_restarts`` restarts.
    """
    if sp.issparse(lap):
        lap = sp.csr_matrix(lap, dtype=np.float64)
    else:
        lap = np.asarray(lap, dtype=np.float64)
    scale = _check_symmetric(lap)
    n = lap.shape[0]
    if n < 2:
        raise ValueError("a Fiedler pair needs at least two nodes")

    # Gershgorin bound on the spectral radius
    if sp.issparse(lap):
        norm = float(abs(lap).sum(axis=1).max())
    else:
        norm = float(np.abs(lap).sum(axis=1).max())
    norm = max(norm, scale, 1e-300)

    ones = np.full(n, 1.0 / np.sqrt(n))
    dim = n - 1
    kmax = min(dim, max_krylov)
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(n)

    residual = np.inf
    for restart in range(max_restarts + 1):
        theta, vec, residual = _lanczos(lap, start, ones, kmax, dim, tol * norm)
        if residual <= tol * norm:
            break
        # a basis spanning the whole complement is exact up to rounding
        if kmax == dim and residual <= 1e-8 * norm:
            break
        _log.debug("fiedler restart %d, residual %.3e", restart, residual)
        start = vec
    else:
        raise ConvergenceError("Lanczos did not converge", residual)

    vec = vec - ones * (ones @ vec)
    vec /= np.linalg.norm(vec)
    if vec[np.argmax(np.abs(vec))] < 0:
        vec = -vec
    return float(theta), vec


def _lanczos(lap, start, ones, kmax, dim, atol):
    n = start.shape[0]
    q = start - ones * (ones @ start)
    q /= np.linalg.norm(q)
    basis = np.zeros((n, kmax))
    alphas = np.zeros(kmax)
    betas = np.zeros(kmax)
    basis[:, 0] = q
    best = (np.inf, q, np.inf)
    for k in range(kmax):
        w = lap @ basis[:, k]
        alphas[k] = basis[:, k] @ w
        # two passes of classical Gram-Schmidt against the basis and 1
        for _ in range(2):
            w -= basis[:, : k + 1] @ (basis[:, : k + 1].T @ w)
            w -= ones * (ones @ w)
        beta = np.linalg.norm(w)
        betas[k] = beta
        exhausted = k + 1 == dim or k + 1 == kmax or beta <= 1e-14 * max(abs(alphas[k]), 1.0)
        if exhausted or (k + 1) % 10 == 0:
            evals, evecs = eigh_tridiagonal(alphas[: k + 1], betas[:k])
            theta, s = evals[0], evecs[:, 0]
            bound = abs(beta * s[-1])
            if bound <= atol or exhausted:
                vec = basis[:, : k + 1] @ s
                true_res = np.linalg.norm(lap @ vec - theta * vec)
                best = (theta, vec, true_res)
                if true_res <= atol or exhausted:
                    return best
        if k + 1 < kmax:
            basis[:, k + 1] = w / beta
    return best
