"""Adam with bias correction, written functionally over named arrays."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

DEFAULT_LR = 1e-4


@dataclass(frozen=True)
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.step < 0:
            raise ValueError("step counter must be non-negative")


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """Apply one Adam update; returns new parameter arrays and a new state.

    Inputs are never modified, so the same ``(params, grads, state)`` always
    maps to the same output.
    """
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r} {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_params[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=step, m=new_m, v=new_v)
