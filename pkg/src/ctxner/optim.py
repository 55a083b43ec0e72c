"""Adam with bias correction (Kingma & Ba, 2014)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import DimensionError, Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
) -> tuple[Sequence[Tensor], AdamState]:
    """Apply one in-place Adam update; a ``None`` grad counts as zeros.

    Moment buffers are created lazily on the first call, so one state
    object tracks one fixed, ordered parameter list.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("AdamState tracks a different number of parameters")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.data.shape:
            raise DimensionError(f"moment shape {m.shape} != param shape {p.data.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.data.shape}")
        # in-place forms of m_hat / (sqrt(v_hat) + eps) to avoid temporaries
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        sq = g * g
        sq *= 1.0 - b2
        v += sq
        denom = np.divide(v, corr2, out=sq)
        np.sqrt(denom, out=denom)
        denom += state.epsilon
        step = np.divide(m, denom, out=denom)
        step *= state.learning_rate / corr1
        p.data -= step
    return params, state
