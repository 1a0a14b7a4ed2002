"""Weighted graph convolution with a dominant self-loop.

For a weight matrix ``W`` over a node set the layer computes::

    relu(D^-1/2 (W + beta I) D^-1/2 H theta),   D_ii = sum_j |W_ij + beta delta_ij|

Degrees use absolute weights so that signed user-preference weights can never
produce a zero or negative degree.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True, eq=False)
class PropagationLayer:
    theta: np.ndarray
    beta: float

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"self-loop weight must be positive, got {self.beta}")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta has non-finite entries")


def default_beta(weights: sp.spmatrix) -> float:
    """One more than the largest absolute weight, so the self-loop dominates."""
    if weights.nnz == 0:
        return 1.0
    return 1.0 + float(abs(weights).max())


def normalized_adjacency(weights: sp.spmatrix, beta: float) -> sp.csr_matrix:
    """``D^-1/2 (W + beta I) D^-1/2`` as a CSR matrix."""
    if weights.shape[0] != weights.shape[1]:
        raise ValueError(f"weight matrix must be square, got {weights.shape}")
    if not beta > 0:
        raise ValueError("beta must be positive")
    w = (sp.csr_matrix(weights, dtype=np.float64) + beta * sp.identity(weights.shape[0], format="csr")).tocsr()
    deg = np.asarray(abs(w).sum(axis=1)).ravel()
    scale = sp.diags(1.0 / np.sqrt(deg))
    out = (scale @ w @ scale).tocsr()
    out.sort_indices()
    return out


def bipartite_block(cross: sp.spmatrix) -> sp.csr_matrix:
    """Square ``[[0, B], [B^T, 0]]`` over the union of both node sets."""
    cross = sp.csr_matrix(cross, dtype=np.float64)
    return sp.bmat([[None, cross], [cross.T, None]], format="csr")


def propagate(weights: sp.spmatrix, signals: np.ndarray, layer: PropagationLayer) -> np.ndarray:
    """Apply one convolution layer to ``signals`` (one row per node)."""
    signals = np.asarray(signals, dtype=np.float64)
    if signals.shape[0] != weights.shape[0]:
        raise ValueError(f"{signals.shape[0]} signal rows for {weights.shape[0]} nodes")
    if signals.shape[1] != layer.theta.shape[0]:
        raise ValueError(f"signal width {signals.shape[1]} does not match theta {layer.theta.shape}")
    adj = normalized_adjacency(weights, layer.beta)
    return np.maximum(np.asarray(adj @ signals) @ layer.theta, 0.0)
