"""Adam optimizer as a pure function over numpy arrays."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamState", "adam_init", "adam_step"]


class AdamState:
    """First/second-moment accumulators plus the shared step counter."""

    def __init__(self, shapes):
        self.m = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.v = [np.zeros(s, dtype=np.float64) for s in shapes]
        self.step = 0


def adam_init(params) -> AdamState:
    return AdamState([np.shape(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One standard Adam update with bias correction.

    Returns the new parameter arrays; moment buffers in `state` are
    updated in place and the step counter advances.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"param {i}: grad shape {g.shape} != param shape {p.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out
