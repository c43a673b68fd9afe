"""ADAM with bias correction, updating an :class:`MlpModel` in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import GradientTape, MlpModel


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    @classmethod
    def for_model(cls, model: MlpModel, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        state.m = [np.zeros_like(p) for p in model.parameters()]
        state.v = [np.zeros_like(p) for p in model.parameters()]
        return state


def adam_step(model: MlpModel, tape: GradientTape, state: AdamState) -> MlpModel:
    """One bias-corrected ADAM update. Mutates ``model`` and ``state``; bumps
    ``model.version`` so caches from before the step are rejected."""
    if not tape.matches(model):
        raise ValueError("gradient tape shape does not match the model")
    params = model.parameters()
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("ADAM state shape does not match the model")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, tape.parameters(), state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    model.version += 1
    return model
