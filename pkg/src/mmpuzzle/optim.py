"""Adam optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .errors import NumericError


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    checked: bool = True,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns fresh params and state.

    Missing gradients are treated as zero (the moments still decay).
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        g = np.asarray(g, dtype=p.dtype)
        if checked and not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for '{name}'")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / c1
        vhat = v / c2
        new[name] = (p - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return new, state
