"""Self-attention probe used for information-flow diagnostics.

The probe stands in for the language model when measuring how information
moves between token groups.  Its sequence is

    [semantic patches (M); artifact patches (N); instruction tokens (T); cls]

where the instruction tokens and the class token are learned vectors (the
instruction group is a surrogate for text tokens).  Each layer applies a
parameter-free layer norm, one attention head with D x D projections over
the whole sequence and a residual add.  A linear classifier reads the class
token after the last layer.

A single layer would make every attention entry outside the class-token row
irrelevant to the loss, so semantic/artifact flows could not be measured;
the default depth is therefore three, which also gives one layer per depth
bucket.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapter import bce, bce_logit_grad
from .errors import ConfigError, ContractError
from .layers import attention_backward, attention_forward, init_linear
from .optim import AdamState, adam_step
from .tensor import RandomSource, layer_norm, layer_norm_backward

PREFIX = "ap"


@dataclass
class ProbeConfig:
    layers: int = 3
    text_tokens: int = 4
    steps: int = 500
    learning_rate: float = 3e-4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("probe.layers", "must be >= 1")
        if self.text_tokens < 1:
            raise ConfigError("probe.text_tokens", "must be >= 1 (the text surrogate group)")
        if self.steps < 0:
            raise ConfigError("probe.steps", "must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("probe.learning_rate", "must be > 0")
        if self.batch_size < 1:
            raise ConfigError("probe.batch_size", "must be >= 1")


@dataclass(frozen=True)
class Layout:
    """Index ranges of the token groups inside the probe sequence."""

    M: int
    N: int
    T: int

    @property
    def sem(self) -> slice:
        return slice(0, self.M)

    @property
    def art(self) -> slice:
        return slice(self.M, self.M + self.N)

    @property
    def visual(self) -> slice:
        return slice(0, self.M + self.N)

    @property
    def text(self) -> slice:
        return slice(self.M + self.N, self.M + self.N + self.T)

    @property
    def cls(self) -> int:
        return self.M + self.N + self.T

    @property
    def length(self) -> int:
        return self.M + self.N + self.T + 1


def init_probe(D: int, cfg: ProbeConfig) -> dict:
    rng = RandomSource(cfg.seed)
    p = {f"{PREFIX}.tokens": rng.normal_matrix(cfg.text_tokens + 1, D, std=1.0 / math.sqrt(D))}
    for layer in range(cfg.layers):
        for name in ("W_Q", "W_K", "W_V"):
            p[f"{PREFIX}.l{layer}.{name}"] = init_linear(rng, D, D)
    p[f"{PREFIX}.w"] = rng.normal_matrix(1, D, std=1.0 / math.sqrt(D)).reshape(-1)
    p[f"{PREFIX}.b"] = np.zeros(1)
    return p


def probe_layers(params: dict) -> int:
    n = 0
    while f"{PREFIX}.l{n}.W_Q" in params:
        n += 1
    return n


def probe_forward(F_sem, F_art, params: dict, attn_delta=None):
    """Returns (logits (B,), per-layer attention maps, cache).

    ``attn_delta`` optionally maps a layer index to an additive perturbation
    of that layer's attention map (for finite-difference checks).
    """
    F_sem = np.asarray(F_sem, dtype=np.float64)
    F_art = np.asarray(F_art, dtype=np.float64)
    if F_sem.ndim == 2:
        F_sem, F_art = F_sem[None], F_art[None]
    tokens = params[f"{PREFIX}.tokens"]
    D = tokens.shape[1]
    if F_sem.shape[-1] != D or F_art.shape[-1] != D or F_sem.shape[0] != F_art.shape[0]:
        raise ContractError(f"probe expects (B, M, {D}) and (B, N, {D}) inputs, got "
                            f"{F_sem.shape} and {F_art.shape}")
    B = F_sem.shape[0]
    layout = Layout(F_sem.shape[1], F_art.shape[1], tokens.shape[0] - 1)
    X = np.concatenate([F_sem, F_art, np.broadcast_to(tokens, (B,) + tokens.shape)], axis=1)
    ones, zeros = np.ones(D), np.zeros(D)
    steps, maps = [], []
    for layer in range(probe_layers(params)):
        lp = f"{PREFIX}.l{layer}"
        Xn, ln_cache = layer_norm(X, ones, zeros)
        delta = None if attn_delta is None else attn_delta.get(layer)
        H, A, att_cache = attention_forward(Xn, Xn, params[f"{lp}.W_Q"], params[f"{lp}.W_K"],
                                            params[f"{lp}.W_V"], delta)
        steps.append((ln_cache, att_cache))
        maps.append(A)
        X = X + H
    cls = X[:, layout.cls]
    logits = cls @ params[f"{PREFIX}.w"] + params[f"{PREFIX}.b"][0]
    return logits, maps, {"layout": layout, "steps": steps, "cls": cls, "B": B}


def probe_backward(params: dict, cache: dict, dlogits):
    """Returns (grads, per-layer dL/dA) for upstream gradient dlogits (B,)."""
    layout = cache["layout"]
    B = cache["B"]
    D = params[f"{PREFIX}.tokens"].shape[1]
    grads = {f"{PREFIX}.w": cache["cls"].T @ dlogits, f"{PREFIX}.b": np.array([dlogits.sum()])}
    dX = np.zeros((B, layout.length, D))
    dX[:, layout.cls] = dlogits[:, None] * params[f"{PREFIX}.w"][None, :]
    dmaps = [None] * len(cache["steps"])
    for layer in reversed(range(len(cache["steps"]))):
        lp = f"{PREFIX}.l{layer}"
        ln_cache, att_cache = cache["steps"][layer]
        dq, dkv, dWq, dWk, dWv, dA = attention_backward(
            att_cache, dX, params[f"{lp}.W_Q"], params[f"{lp}.W_K"], params[f"{lp}.W_V"])
        grads[f"{lp}.W_Q"], grads[f"{lp}.W_K"], grads[f"{lp}.W_V"] = dWq, dWk, dWv
        dmaps[layer] = dA
        dx, _, _ = layer_norm_backward(ln_cache, dq + dkv)
        dX = dX + dx
    grads[f"{PREFIX}.tokens"] = dX[:, layout.text.start:].sum(axis=0)
    return grads, dmaps


def probe_loss(F_sem, F_art, params: dict, labels, attn_delta=None):
    logits, maps, cache = probe_forward(F_sem, F_art, params, attn_delta)
    return float(np.mean(bce(logits, labels))), logits, maps, cache


def probe_gradients(F_sem, F_art, params: dict, labels):
    """(mean loss, grads of the mean loss, maps, per-sample dL_i/dA per layer)."""
    loss, logits, maps, cache = probe_loss(F_sem, F_art, params, labels)
    dlogits = bce_logit_grad(logits, labels) / len(labels)
    grads, dmaps = probe_backward(params, cache, dlogits)
    per_sample = [g * len(labels) for g in dmaps]
    return loss, grads, maps, per_sample, cache


def train_probe(F_sem, F_art, labels, cfg: ProbeConfig) -> tuple[dict, list[float]]:
    """Adam on minibatches drawn from a seed-derived stream; returns (params, losses)."""
    labels = np.asarray(labels, dtype=np.float64)
    params = init_probe(F_sem.shape[-1], cfg)
    rng = RandomSource(cfg.seed).spawn()
    n = len(labels)
    bs = min(cfg.batch_size, n)
    order, pos = rng.permutation(n), 0
    state = AdamState()
    losses = []
    for _ in range(cfg.steps):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        loss, grads, _, _, _ = probe_gradients(F_sem[idx], F_art[idx], params, labels[idx])
        losses.append(loss)
        adam_step(params, grads, state, cfg.learning_rate)
    return params, losses
