"""Artifact -> semantic transfer guided by a transport plan over patch pairs.

The plan couples semantic rows with artifact columns under the cost
-JS(S_i, P_j), so mass flows towards pairs whose fake probabilities disagree.
The cross-attention block at the bottom replaces the plan with dot-product
attention; it exists for the ablation comparison only.
"""

from __future__ import annotations

import numpy as np

from .layers import (attention_backward, attention_forward, init_linear,
                     init_mlp, mlp_backward, mlp_forward)
from .scoring import HeadParameters, cost_matrix, score_patches
from .tensor import (RandomSource, layer_norm, layer_norm_backward, param_grad,
                     swap)
from .transport import TransportConfig, row_normalize, sinkhorn

PREFIX = "top"
CROSS = "cross"


def init_top_fusion(rng: RandomSource, D: int, d: int, use_norm: bool = False) -> dict:
    p = {f"{PREFIX}.W_art": init_linear(rng, D, d)}
    p.update(init_mlp(rng, f"{PREFIX}.mlp", d, 4 * d, D))
    if use_norm:
        p[f"{PREFIX}.ln.g"] = np.ones(d)
        p[f"{PREFIX}.ln.b"] = np.zeros(d)
    return p


def top_fuse(F_sem, F_art, gamma_tilde, params: dict, use_norm: bool = False):
    """F_sem + MLP(gamma_tilde @ (F_art @ W_art)); returns (fused, cache)."""
    proj = F_art @ params[f"{PREFIX}.W_art"]
    transfer = gamma_tilde @ proj
    if use_norm:
        mlp_in, ln = layer_norm(transfer, params[f"{PREFIX}.ln.g"], params[f"{PREFIX}.ln.b"])
    else:
        mlp_in, ln = transfer, None
    out, mc = mlp_forward(params, f"{PREFIX}.mlp", mlp_in)
    cache = {"F_art": F_art, "proj": proj, "gamma_tilde": gamma_tilde, "ln": ln, "mlp": mc,
             "transfer": transfer}
    return F_sem + out, cache


def top_fuse_backward(params: dict, cache: dict, dF_hat):
    """Returns (grads, dL/d gamma_tilde)."""
    dmlp_in, grads = mlp_backward(params, f"{PREFIX}.mlp", cache["mlp"], dF_hat)
    if cache["ln"] is not None:
        dtransfer, grads[f"{PREFIX}.ln.g"], grads[f"{PREFIX}.ln.b"] = layer_norm_backward(
            cache["ln"], dmlp_in)
    else:
        dtransfer = dmlp_in
    dgamma = dtransfer @ swap(cache["proj"])
    dproj = swap(cache["gamma_tilde"]) @ dtransfer
    grads[f"{PREFIX}.W_art"] = param_grad(cache["F_art"], dproj)
    return grads, dgamma


def top_fusion_forward(F_sem, F_art, art_head: HeadParameters, sem_head: HeadParameters,
                       transport_cfg: TransportConfig, params: dict, *,
                       use_norm: bool = False, strict_plan: bool = False):
    """Score patches, solve the plan, and fuse.

    Returns (fused semantic features, plan, S, P).  With ``strict_plan`` the
    raw plan (rows summing to 1/M) is applied instead of its row-normalized
    form.
    """
    S = score_patches(F_sem, sem_head)
    P = score_patches(F_art, art_head)
    plan = sinkhorn(cost_matrix(S, P), transport_cfg)
    gamma_tilde = plan.gamma if strict_plan else row_normalize(plan)
    fused, _ = top_fuse(F_sem, F_art, gamma_tilde, params, use_norm)
    return fused, plan, S, P


def cross_hidden_width(D: int, d: int) -> int:
    """Hidden width that matches the cross block's size to the TOP block.

    TOP learns W_art plus a d -> 4d -> D MLP.  The cross block also learns
    query and key projections (2 D d more), so its MLP hidden width h solves
    h (d + 1 + D) = 4d (d + 1 + D) - 2 D d, rounded to the nearest integer.
    """
    return max(1, round(4 * d - 2 * D * d / (d + 1 + D)))


def init_cross_transfer(rng: RandomSource, D: int, d: int) -> dict:
    p = {
        f"{CROSS}.W_q": init_linear(rng, D, d),
        f"{CROSS}.W_k": init_linear(rng, D, d),
        f"{CROSS}.W_v": init_linear(rng, D, d),
    }
    p.update(init_mlp(rng, f"{CROSS}.mlp", d, cross_hidden_width(D, d), D))
    return p


def cross_transfer(F_sem, F_art, params: dict, attn_delta=None):
    """F_sem + MLP(softmax(Q K^T / sqrt(d)) V), semantic queries over artifact keys."""
    H, A, att = attention_forward(F_sem, F_art, params[f"{CROSS}.W_q"],
                                  params[f"{CROSS}.W_k"], params[f"{CROSS}.W_v"], attn_delta)
    out, mc = mlp_forward(params, f"{CROSS}.mlp", H)
    return F_sem + out, A, {"att": att, "mlp": mc}


def cross_transfer_backward(params: dict, cache: dict, dF_hat):
    dH, grads = mlp_backward(params, f"{CROSS}.mlp", cache["mlp"], dF_hat)
    _, _, dWq, dWk, dWv, dA = attention_backward(
        cache["att"], dH, params[f"{CROSS}.W_q"], params[f"{CROSS}.W_k"], params[f"{CROSS}.W_v"])
    grads[f"{CROSS}.W_q"], grads[f"{CROSS}.W_k"], grads[f"{CROSS}.W_v"] = dWq, dWk, dWv
    return grads, dA
