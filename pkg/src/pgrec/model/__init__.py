"""Graph-convolution embeddings and the preference-weight model."""

from .network import (
    Dimensions,
    EmbeddingTable,
    Embeddings,
    GraphOperators,
    ModelParams,
    assemble_item_reprs,
    assemble_pref_reprs,
    assemble_user_reprs,
    build_operators,
    embed,
    init_params,
    predict_weight,
)
from .propagation import PropagationLayer, bipartite_block, default_beta, normalized_adjacency, propagate
from .training import DivergenceError, TrainConfig, TrainResult, train

__all__ = [
    "Dimensions",
    "EmbeddingTable",
    "Embeddings",
    "GraphOperators",
    "ModelParams",
    "PropagationLayer",
    "DivergenceError",
    "TrainConfig",
    "TrainResult",
    "assemble_item_reprs",
    "assemble_pref_reprs",
    "assemble_user_reprs",
    "bipartite_block",
    "build_operators",
    "default_beta",
    "embed",
    "init_params",
    "normalized_adjacency",
    "predict_weight",
    "propagate",
    "train",
]
