"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError

__all__ = ["OptimizerState", "adam_step"]


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus hyperparameters.

    Moment buffers are created lazily on the first step so the state can
    be constructed before the parameter list is final.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
    """Apply one bias-corrected Adam update in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
