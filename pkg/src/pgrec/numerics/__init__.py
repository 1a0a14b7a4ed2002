"""Linear algebra, differentiation and optimization primitives."""

from .autodiff import Tape, Var, backward
from .eigen import ConvergenceError, fiedler_vector, laplacian
from .optim import AdamState, adam_step

__all__ = [
    "Tape",
    "Var",
    "backward",
    "AdamState",
    "adam_step",
    "ConvergenceError",
    "fiedler_vector",
    "laplacian",
]
