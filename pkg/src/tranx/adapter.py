"""The full adapter: TOP transfer into semantic features, X transfer into
artifact features, and a pooled linear probe standing in for the language
model.

Forward caches hold everything the analytic backward needs.  Batched inputs
have shape (B, N, D) and (B, M, D); labels are 0 (real) or 1 (fake).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UsageError
from .layers import init_linear
from .scoring import (PROB_CLAMP, HeadParameters, cost_matrix,
                      cost_matrix_backward, score_patches_with_grad)
from .tensor import RandomSource, param_grad, sigmoid
from .top_fusion import (cross_hidden_width, cross_transfer,
                         cross_transfer_backward, init_cross_transfer,
                         init_top_fusion, top_fuse, top_fuse_backward)
from .transport import TransportConfig, sinkhorn, sinkhorn_backward
from .x_fusion import init_x_fusion, x_fuse, x_fuse_backward

VARIANTS = ("concat", "x_only", "top_only", "full", "cross_replaces_top")
HEAD_MODES = ("frozen", "trainable")
OT_GRAD_MODES = ("stop", "unroll")


@dataclass
class AdapterConfig:
    D: int = 32
    d: int | None = None
    L: int = 2
    transport: TransportConfig = field(default_factory=TransportConfig)
    head_mode: str = "frozen"
    ot_grad: str = "stop"
    seed: int = 0
    learning_rate: float = 3e-3
    steps: int = 500
    batch_size: int = 16
    variant: str = "full"
    strict_plan: bool = False
    top_norm: bool = False
    x_prenorm: bool = True
    head_pretrain_steps: int = 200
    head_learning_rate: float = 0.05
    eval_fraction: float = 0.25

    def __post_init__(self):
        if self.d is None:
            self.d = max(1, self.D // 2)
        for name in ("D", "d", "L"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"adapter {name} must be >= 1")
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown variant '{self.variant}'; expected one of {VARIANTS}")
        if self.head_mode not in HEAD_MODES:
            raise ContractError(f"head_mode must be one of {HEAD_MODES}")
        if self.ot_grad not in OT_GRAD_MODES:
            raise ContractError(f"ot_grad must be one of {OT_GRAD_MODES}")
        for name in ("learning_rate", "head_learning_rate"):
            if not getattr(self, name) > 0:
                raise ContractError(f"{name} must be > 0")
        if self.steps < 0 or self.batch_size < 1 or self.head_pretrain_steps < 0:
            raise ContractError("steps and head_pretrain_steps must be >= 0, batch_size >= 1")
        if not 0 < self.eval_fraction < 1:
            raise ContractError("eval_fraction must lie in (0, 1)")


def uses_top(variant: str) -> bool:
    return variant in ("top_only", "full")


def uses_x(variant: str) -> bool:
    return variant in ("x_only", "full", "cross_replaces_top")


def uses_cross(variant: str) -> bool:
    return variant == "cross_replaces_top"


def init_params(cfg: AdapterConfig) -> dict:
    """Fresh parameters for cfg.variant.

    Streams are spawned in a fixed order (probe, heads, top, x, cross) for
    every variant, so shared blocks start identical across variants.
    """
    root = RandomSource(cfg.seed)
    rngs = {name: root.spawn() for name in ("probe", "heads", "top", "x", "cross")}
    D, d = cfg.D, cfg.d
    p = {
        "probe.w": init_linear(rngs["probe"], 2 * D, 1).reshape(-1),
        "probe.b": np.zeros(1),
    }
    if uses_top(cfg.variant):
        p["head.art.w"] = init_linear(rngs["heads"], D, 1).reshape(-1)
        p["head.art.b"] = np.zeros(1)
        p["head.sem.w"] = init_linear(rngs["heads"], D, 1).reshape(-1)
        p["head.sem.b"] = np.zeros(1)
        p.update(init_top_fusion(rngs["top"], D, d, cfg.top_norm))
    if uses_x(cfg.variant):
        p.update(init_x_fusion(rngs["x"], D, d, cfg.L, cfg.x_prenorm))
    if uses_cross(cfg.variant):
        p.update(init_cross_transfer(rngs["cross"], D, d))
    return p


def trainable_names(params: dict, cfg: AdapterConfig) -> list[str]:
    return [k for k in params if cfg.head_mode == "trainable" or not k.startswith("head.")]


def heads_from(params: dict) -> tuple[HeadParameters, HeadParameters]:
    return (HeadParameters(params["head.art.w"], params["head.art.b"][0]),
            HeadParameters(params["head.sem.w"], params["head.sem.b"][0]))


def fingerprint(params: dict) -> tuple:
    return tuple((k, v.shape, float(np.sum(v))) for k, v in sorted(params.items()))


def _check_inputs(F_art, F_sem, cfg):
    F_art = np.asarray(F_art, dtype=np.float64)
    F_sem = np.asarray(F_sem, dtype=np.float64)
    if F_art.ndim == 2:
        F_art, F_sem = F_art[None], F_sem[None]
    if F_art.ndim != 3 or F_sem.ndim != 3 or F_art.shape[0] != F_sem.shape[0]:
        raise ContractError(f"adapter: expected (B,N,D)/(B,M,D), got {F_art.shape} and {F_sem.shape}")
    if F_art.shape[-1] != cfg.D or F_sem.shape[-1] != cfg.D:
        raise ContractError(f"adapter: feature dim must be D={cfg.D}")
    if not (np.all(np.isfinite(F_art)) and np.all(np.isfinite(F_sem))):
        raise ContractError("adapter: non-finite features")
    return F_art, F_sem


def adapter_forward(F_art, F_sem, params: dict, cfg: AdapterConfig, *,
                    gamma_override=None, fixed_iters=None, attn_delta=None):
    """Returns (fused semantic, fused artifact, cache).

    ``gamma_override`` replaces the solved plan (the stop-gradient view of
    transport); ``fixed_iters`` pins Sinkhorn iteration counts; ``attn_delta``
    perturbs attention maps ({"x": {layer: array}, "cross": array}).  All
    three exist for finite-difference checks.
    """
    F_art, F_sem = _check_inputs(F_art, F_sem, cfg)
    variant = cfg.variant
    attn_delta = attn_delta or {}
    cache = {"variant": variant, "fingerprint": fingerprint(params), "F_art": F_art,
             "F_sem": F_sem, "M": F_sem.shape[1]}
    sem_hat, art_hat = F_sem, F_art
    if uses_top(variant):
        S, dS = score_patches_with_grad(F_sem, params["head.sem.w"], params["head.sem.b"][0])
        P, dP = score_patches_with_grad(F_art, params["head.art.w"], params["head.art.b"][0])
        C = cost_matrix(S, P)
        if gamma_override is None:
            plan = sinkhorn(C, cfg.transport, fixed_iters=fixed_iters,
                            record=cfg.ot_grad == "unroll")
            gamma = plan.gamma
        else:
            plan, gamma = None, np.asarray(gamma_override, dtype=np.float64)
        gamma_tilde = gamma if cfg.strict_plan else F_sem.shape[1] * gamma
        sem_hat, tc = top_fuse(F_sem, F_art, gamma_tilde, params, cfg.top_norm)
        cache.update(S=S, P=P, dS=dS, dP=dP, C=C, plan=plan, gamma=gamma,
                     gamma_tilde=gamma_tilde, top=tc)
    elif uses_cross(variant):
        sem_hat, A, cc = cross_transfer(F_sem, F_art, params, attn_delta.get("cross"))
        cache.update(cross=cc, cross_attention=A)
    if uses_x(variant):
        art_hat, trace, xc = x_fuse(F_art, F_sem, params, cfg.x_prenorm, attn_delta.get("x"))
        cache.update(x=xc, x_attention=trace)
    cache.update(sem_hat=sem_hat, art_hat=art_hat)
    return sem_hat, art_hat, cache


def probe_logits(sem_hat, art_hat, params: dict) -> np.ndarray:
    pooled = np.concatenate([sem_hat.mean(axis=-2), art_hat.mean(axis=-2)], axis=-1)
    return pooled @ params["probe.w"] + params["probe.b"][0]


def bce(logits, labels) -> np.ndarray:
    """Per-sample binary cross-entropy on clamped sigmoid probabilities."""
    p = np.clip(sigmoid(np.asarray(logits, dtype=np.float64)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def loss(sem_hat, art_hat, params: dict, labels) -> float:
    """Mean BCE of the pooled probe over the batch."""
    return float(np.mean(bce(probe_logits(sem_hat, art_hat, params), labels)))


def bce_logit_grad(logits, labels) -> np.ndarray:
    """d BCE / d logit: sigmoid(z) - y, zero where the probability clamp is active."""
    raw = sigmoid(np.asarray(logits, dtype=np.float64))
    p = np.clip(raw, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return np.where(p == raw, raw - np.asarray(labels, dtype=np.float64), 0.0)


def forward_loss(F_art, F_sem, params, cfg, labels, **kw):
    sem_hat, art_hat, cache = adapter_forward(F_art, F_sem, params, cfg, **kw)
    logits = probe_logits(sem_hat, art_hat, params)
    cache["logits"] = logits
    return float(np.mean(bce(logits, labels))), cache


def backward(cache: dict, params: dict, labels, cfg: AdapterConfig):
    """Gradients of the batch-mean loss for every parameter present.

    Returns (grads, aux); aux holds per-sample dL/dA for the transfer maps
    (``gamma_tilde`` / ``cross`` for art->sem, ``x`` per layer for sem->art),
    scaled to the per-sample loss so saliencies do not depend on batch size.
    """
    if cache.get("fingerprint") != fingerprint(params):
        raise ContractError("backward: stale cache (parameters changed since forward)")
    if "logits" not in cache:
        raise ContractError("backward: cache lacks probe logits; use forward_loss")
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    B = cache["F_art"].shape[0]
    if labels.shape[0] != B:
        raise ContractError(f"backward: {labels.shape[0]} labels for batch of {B}")
    D = cfg.D
    dz = bce_logit_grad(cache["logits"], labels) / B
    sem_hat, art_hat = cache["sem_hat"], cache["art_hat"]
    pooled = np.concatenate([sem_hat.mean(axis=1), art_hat.mean(axis=1)], axis=-1)
    grads = {"probe.w": pooled.T @ dz, "probe.b": np.array([dz.sum()])}
    w = params["probe.w"]
    dsem = np.broadcast_to((dz[:, None] * w[None, :D])[:, None, :] / sem_hat.shape[1], sem_hat.shape)
    dart = np.broadcast_to((dz[:, None] * w[None, D:])[:, None, :] / art_hat.shape[1], art_hat.shape)
    aux = {}
    variant = cache["variant"]
    if uses_top(variant):
        g, dgt = top_fuse_backward(params, cache["top"], dsem)
        grads.update(g)
        aux["gamma_tilde"] = dgt * B
        zeros = {k: np.zeros_like(params[k]) for k in ("head.art.w", "head.art.b", "head.sem.w", "head.sem.b")}
        if cfg.ot_grad == "unroll" and cache["plan"] is not None:
            dgamma = dgt if cfg.strict_plan else dgt * cache["M"]
            dC = sinkhorn_backward(cache["C"], cache["plan"], dgamma)
            dS, dP = cost_matrix_backward(cache["S"], cache["P"], dC)
            dls, dla = dS * cache["dS"], dP * cache["dP"]
            zeros["head.sem.w"] = param_grad(cache["F_sem"], dls[..., None]).reshape(-1)
            zeros["head.sem.b"] = np.array([dls.sum()])
            zeros["head.art.w"] = param_grad(cache["F_art"], dla[..., None]).reshape(-1)
            zeros["head.art.b"] = np.array([dla.sum()])
        grads.update(zeros)
    elif uses_cross(variant):
        g, dA = cross_transfer_backward(params, cache["cross"], dsem)
        grads.update(g)
        aux["cross"] = dA * B
    if uses_x(variant):
        g, dattn = x_fuse_backward(params, cache["x"], dart)
        grads.update(g)
        aux["x"] = [a * B for a in dattn]
    return grads, aux


def param_count(cfg: AdapterConfig, variant: str | None = None) -> int:
    """Learnable parameters updated by the optimizer for ``variant``.

    probe     2D + 1                      (pooled linear classifier)
    heads     2(D + 1)                    (only when TOP is present and trainable)
    top       Dd + (4d^2 + 4d) + (4dD + D) [+ 2d with the pre-MLP norm]
    x         2Dd                         (input projections)
              + L * (3d^2 + (4d^2 + 4d) + (4d^2 + d) [+ 4d with pre-norms])
              + 2d                        (final norm)
              + (4d^2 + 4d) + (4dD + D)   (output MLP)
    cross     3Dd + dh + h + hD + D       (h = cross_hidden_width(D, d))
    """
    variant = variant or cfg.variant
    D, d, L = cfg.D, cfg.d, cfg.L
    total = 2 * D + 1
    if uses_top(variant):
        if cfg.head_mode == "trainable":
            total += 2 * (D + 1)
        total += D * d + (4 * d * d + 4 * d) + (4 * d * D + D) + (2 * d if cfg.top_norm else 0)
    if uses_x(variant):
        per_layer = 3 * d * d + (4 * d * d + 4 * d) + (4 * d * d + d) + (4 * d if cfg.x_prenorm else 0)
        total += 2 * D * d + L * per_layer + 2 * d + (4 * d * d + 4 * d) + (4 * d * D + D)
    if uses_cross(variant):
        h = cross_hidden_width(D, d)
        total += 3 * D * d + d * h + h + h * D + D
    return total


# Adapter at 7B-language-model width: 39,628,289 learnable parameters
# (full variant, frozen heads), within 1% of a 40M budget.
LARGE_CONFIG = {"D": 4096, "d": 512, "L": 5}


def count_arrays(params: dict, names) -> int:
    return int(sum(params[k].size for k in names))
