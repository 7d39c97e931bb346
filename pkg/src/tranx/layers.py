"""Two-layer GELU MLPs and single-head attention with explicit backward passes.

Parameters live in flat ``dict[str, ndarray]`` maps keyed by dotted names;
each forward returns ``(output, cache)`` and each backward returns gradients
under the same names.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (RandomSource, gelu, gelu_grad, param_grad, row_softmax,
                     softmax_backward, sum_rows, swap)


def init_linear(rng: RandomSource, fan_in: int, fan_out: int, zero: bool = False) -> np.ndarray:
    if zero:
        return np.zeros((fan_in, fan_out))
    return rng.normal_matrix(fan_in, fan_out, std=1.0 / math.sqrt(fan_in))


def init_mlp(rng: RandomSource, prefix: str, d_in: int, hidden: int, d_out: int,
             zero_out: bool = True) -> dict:
    """d_in -> hidden -> d_out; the output layer is zero when ``zero_out``."""
    return {
        f"{prefix}.W1": init_linear(rng, d_in, hidden),
        f"{prefix}.b1": np.zeros(hidden),
        f"{prefix}.W2": init_linear(rng, hidden, d_out, zero=zero_out),
        f"{prefix}.b2": np.zeros(d_out),
    }


def mlp_forward(params: dict, prefix: str, x: np.ndarray):
    h = x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"]
    g = gelu(h)
    y = g @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]
    return y, (x, h, g)


def mlp_backward(params: dict, prefix: str, cache, dy: np.ndarray):
    x, h, g = cache
    grads = {
        f"{prefix}.W2": param_grad(g, dy),
        f"{prefix}.b2": sum_rows(dy),
    }
    dh = (dy @ params[f"{prefix}.W2"].T) * gelu_grad(h)
    grads[f"{prefix}.W1"] = param_grad(x, dh)
    grads[f"{prefix}.b1"] = sum_rows(dh)
    return dh @ params[f"{prefix}.W1"].T, grads


def attention_forward(q_in, kv_in, Wq, Wk, Wv, delta=None):
    """H = softmax(Q K^T / sqrt(d)) V for one head.

    ``delta`` is added to the attention map after the softmax; it exists so
    that finite differences can probe dL/dA entry by entry.
    """
    Q = q_in @ Wq
    K = kv_in @ Wk
    V = kv_in @ Wv
    scale = 1.0 / math.sqrt(Wq.shape[1])
    A = row_softmax(Q @ swap(K) * scale)
    A_used = A if delta is None else A + delta
    H = A_used @ V
    return H, A, (q_in, kv_in, Q, K, V, A, A_used, scale)


def attention_backward(cache, dH, Wq, Wk, Wv):
    """Returns (dq_in, dkv_in, dWq, dWk, dWv, dA)."""
    q_in, kv_in, Q, K, V, A, A_used, scale = cache
    dA = dH @ swap(V)
    dV = swap(A_used) @ dH
    dlogits = softmax_backward(A, dA) * scale
    dQ = dlogits @ K
    dK = swap(dlogits) @ Q
    dq_in = dQ @ Wq.T
    dkv_in = dK @ Wk.T + dV @ Wv.T
    return dq_in, dkv_in, param_grad(q_in, dQ), param_grad(kv_in, dK), param_grad(kv_in, dV), dA
