"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def create(cls, params: Sequence[Parameter], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """Update ``params`` in place from their accumulated gradients.

    Gradients are left untouched; clearing them is the caller's job.
    """
    if len(state.m) != len(params):
        raise ValueError(f"state tracks {len(state.m)} parameters, got {len(params)}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} != parameter shape {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return state


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0
