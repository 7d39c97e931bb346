"""Semantic -> artifact transfer through a stack of cross-attention layers.

Artifact patches query, semantic patches provide keys and values.  The
semantic stream is projected once and never updated; only the artifact
stream evolves from layer to layer.
"""

from __future__ import annotations

import numpy as np

from .layers import (attention_backward, attention_forward, init_linear,
                     init_mlp, mlp_backward, mlp_forward)
from .tensor import RandomSource, layer_norm, layer_norm_backward, param_grad

PREFIX = "x"


def init_x_fusion(rng: RandomSource, D: int, d: int, L: int, prenorm: bool = True) -> dict:
    p = {
        f"{PREFIX}.W_art": init_linear(rng, D, d),
        f"{PREFIX}.W_sem": init_linear(rng, D, d),
    }
    for layer in range(L):
        lp = f"{PREFIX}.l{layer}"
        if prenorm:
            p[f"{lp}.ln_q.g"] = np.ones(d)
            p[f"{lp}.ln_q.b"] = np.zeros(d)
            p[f"{lp}.ln_kv.g"] = np.ones(d)
            p[f"{lp}.ln_kv.b"] = np.zeros(d)
        p[f"{lp}.W_Q"] = init_linear(rng, d, d)
        p[f"{lp}.W_K"] = init_linear(rng, d, d)
        p[f"{lp}.W_V"] = init_linear(rng, d, d)
        p.update(init_mlp(rng, f"{lp}.mlp", d, 4 * d, d))
    p[f"{PREFIX}.ln_f.g"] = np.ones(d)
    p[f"{PREFIX}.ln_f.b"] = np.zeros(d)
    p.update(init_mlp(rng, f"{PREFIX}.out", d, 4 * d, D))
    return p


def num_layers(params: dict) -> int:
    n = 0
    while f"{PREFIX}.l{n}.W_Q" in params:
        n += 1
    return n


def x_fuse(F_art, F_sem, params: dict, prenorm: bool = True, attn_delta=None):
    """Returns (fused artifact features, per-layer attention maps, cache).

    Each attention map has shape (..., N, M) and is row-stochastic.
    ``attn_delta`` optionally maps a layer index to an additive perturbation
    of that layer's attention map.
    """
    L = num_layers(params)
    at = F_art @ params[f"{PREFIX}.W_art"]
    st = F_sem @ params[f"{PREFIX}.W_sem"]
    stream = at
    layers = []
    trace = []
    for layer in range(L):
        lp = f"{PREFIX}.l{layer}"
        if prenorm:
            q_in, ln_q = layer_norm(stream, params[f"{lp}.ln_q.g"], params[f"{lp}.ln_q.b"])
            kv_in, ln_kv = layer_norm(st, params[f"{lp}.ln_kv.g"], params[f"{lp}.ln_kv.b"])
        else:
            q_in, ln_q, kv_in, ln_kv = stream, None, st, None
        delta = None if attn_delta is None else attn_delta.get(layer)
        H, A, att = attention_forward(q_in, kv_in, params[f"{lp}.W_Q"],
                                      params[f"{lp}.W_K"], params[f"{lp}.W_V"], delta)
        X = stream + H
        m, mc = mlp_forward(params, f"{lp}.mlp", X)
        stream = X + m
        layers.append((ln_q, ln_kv, att, mc))
        trace.append(A)
    fin, ln_f = layer_norm(stream, params[f"{PREFIX}.ln_f.g"], params[f"{PREFIX}.ln_f.b"])
    out, oc = mlp_forward(params, f"{PREFIX}.out", fin)
    cache = {"F_art": F_art, "F_sem": F_sem, "layers": layers, "ln_f": ln_f,
             "out": oc, "prenorm": prenorm}
    return F_art + out, trace, cache


def x_fuse_backward(params: dict, cache: dict, dF_hat):
    """Parameter gradients and per-layer dL/dA for dL/d(fused artifact)."""
    grads = {}
    dfin, g = mlp_backward(params, f"{PREFIX}.out", cache["out"], dF_hat)
    grads.update(g)
    dstream, grads[f"{PREFIX}.ln_f.g"], grads[f"{PREFIX}.ln_f.b"] = layer_norm_backward(
        cache["ln_f"], dfin)
    dst = 0.0
    dattn = [None] * len(cache["layers"])
    for layer in range(len(cache["layers"]) - 1, -1, -1):
        lp = f"{PREFIX}.l{layer}"
        ln_q, ln_kv, att, mc = cache["layers"][layer]
        dm, g = mlp_backward(params, f"{lp}.mlp", mc, dstream)
        grads.update(g)
        dX = dstream + dm
        dq_in, dkv_in, dWq, dWk, dWv, dA = attention_backward(
            att, dX, params[f"{lp}.W_Q"], params[f"{lp}.W_K"], params[f"{lp}.W_V"])
        grads[f"{lp}.W_Q"], grads[f"{lp}.W_K"], grads[f"{lp}.W_V"] = dWq, dWk, dWv
        dattn[layer] = dA
        if cache["prenorm"]:
            dprev, grads[f"{lp}.ln_q.g"], grads[f"{lp}.ln_q.b"] = layer_norm_backward(ln_q, dq_in)
            dkv, grads[f"{lp}.ln_kv.g"], grads[f"{lp}.ln_kv.b"] = layer_norm_backward(ln_kv, dkv_in)
        else:
            dprev, dkv = dq_in, dkv_in
        dstream = dX + dprev
        dst = dst + dkv
    grads[f"{PREFIX}.W_art"] = param_grad(cache["F_art"], dstream)
    grads[f"{PREFIX}.W_sem"] = param_grad(cache["F_sem"], dst)
    return grads, dattn
