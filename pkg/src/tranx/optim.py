"""Bias-corrected Adam over flat parameter dictionaries."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, names=None):
    """Update ``params`` in place for every name in ``names`` (default: all grads).

    m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
    p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
    """
    names = list(grads) if names is None else list(names)
    state.t += 1
    c1 = 1.0 - BETA1**state.t
    c2 = 1.0 - BETA2**state.t
    for k in names:
        g = grads[k]
        if g.shape != params[k].shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape "
                                f"{params[k].shape} for '{k}'")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        v = state.v[k]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state
