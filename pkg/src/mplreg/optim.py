"""Adam with bias-corrected moment estimates, as a small stateful helper."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """First/second moment accumulators for one flat parameter vector."""

    step_size: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    @classmethod
    def init(cls, n: int, step_size: float, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            step_size=float(step_size),
            beta1=float(beta1),
            beta2=float(beta2),
            eps=float(eps),
            t=0,
            m=np.zeros(n),
            v=np.zeros(n),
        )


def adam_step(state: AdamState, params: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """One biased-moment-corrected update; returns the new parameter vector."""
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (gradient * gradient)
    mhat = state.m / (1.0 - state.beta1**state.t)
    vhat = state.v / (1.0 - state.beta2**state.t)
    return params - state.step_size * mhat / (np.sqrt(vhat) + state.eps)
