"""Training loop, head pretraining and the ablation driver."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import (VARIANTS, AdapterConfig, backward, forward_loss,
                      init_params, param_count, trainable_names, uses_cross,
                      uses_top, uses_x)
from .diagnostics import info_flow_significance
from .errors import ContractError, UsageError
from .optim import AdamState, adam_step
from .synthgen import stack
from .tensor import RandomSource, sigmoid

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "variant", "loss", "accuracy", "S_art2sem", "S_sem2art")
COMPARISON_COLUMNS = ("variant", "params", "train_loss", "eval_loss", "eval_accuracy",
                      "S_art2sem", "S_sem2art")


def batch_stream(seed: int) -> RandomSource:
    """The minibatch stream: sixth child of the seed, after the five init streams."""
    root = RandomSource(seed)
    for _ in range(5):
        root.spawn()
    return root.spawn()


def split(samples, eval_fraction: float):
    n = len(samples)
    if n < 2:
        raise ContractError("training needs at least two samples")
    n_eval = min(n - 1, max(1, int(round(eval_fraction * n))))
    return samples[: n - n_eval], samples[n - n_eval:]


def _logistic_fit(X, y, w, b, steps: int, lr: float):
    state = AdamState()
    p = {"w": w, "b": b}
    n = X.shape[0]
    for _ in range(steps):
        r = (sigmoid(X @ p["w"] + p["b"][0]) - y) / n
        adam_step(p, {"w": X.T @ r, "b": np.array([r.sum()])}, state, lr)
    return p["w"], p["b"]


def pretrain_heads(params: dict, F_art, F_sem, labels, hot_mask, cfg: AdapterConfig) -> None:
    """Fit both heads in place on per-patch labels.

    Artifact patches are labelled by hotspot membership.  When the two patch
    grids have the same size they are treated as spatially aligned and semantic
    patch i takes the label of artifact patch i; otherwise every semantic patch
    inherits its image label.
    """
    D = F_art.shape[-1]
    Xa, ya = F_art.reshape(-1, D), hot_mask.reshape(-1).astype(np.float64)
    Xs = F_sem.reshape(-1, D)
    if F_sem.shape[1] == F_art.shape[1]:
        ys = ya.copy()
    else:
        ys = np.repeat(labels, F_sem.shape[1]).astype(np.float64)
    steps, lr = cfg.head_pretrain_steps, cfg.head_learning_rate
    params["head.art.w"], params["head.art.b"] = _logistic_fit(
        Xa, ya, params["head.art.w"], params["head.art.b"], steps, lr)
    params["head.sem.w"], params["head.sem.b"] = _logistic_fit(
        Xs, ys, params["head.sem.w"], params["head.sem.b"], steps, lr)


def flow_metrics(cache: dict, aux: dict) -> tuple[float, float]:
    """(S_art2sem, S_sem2art) for one forward/backward; NaN where a path is absent."""
    variant = cache["variant"]
    if uses_top(variant):
        art2sem = info_flow_significance(cache["gamma_tilde"], aux["gamma_tilde"])
    elif uses_cross(variant):
        art2sem = info_flow_significance(cache["cross_attention"], aux["cross"])
    else:
        art2sem = float("nan")
    if uses_x(variant):
        sem2art = float(np.mean([info_flow_significance(A, g)
                                 for A, g in zip(cache["x_attention"], aux["x"])]))
    else:
        sem2art = float("nan")
    return art2sem, sem2art


@dataclass
class TrainResult:
    cfg: AdapterConfig
    params: dict
    history: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    initial_params: dict = field(default_factory=dict)


def evaluate(params: dict, cfg: AdapterConfig, F_art, F_sem, labels) -> dict:
    loss, cache = forward_loss(F_art, F_sem, params, cfg, labels)
    grads, aux = backward(cache, params, labels, cfg)
    art2sem, sem2art = flow_metrics(cache, aux)
    acc = float(np.mean((cache["logits"] > 0) == (labels > 0.5)))
    return {"loss": loss, "accuracy": acc, "S_art2sem": art2sem, "S_sem2art": sem2art}


def train(cfg: AdapterConfig, samples) -> TrainResult:
    """Train cfg.variant for cfg.steps Adam updates.

    History holds steps + 1 rows; row t is measured on the minibatch seen at
    step t before its update, so row ``steps`` reflects the final parameters.
    """
    if cfg.variant not in VARIANTS:
        raise UsageError(f"unknown variant '{cfg.variant}'")
    train_set, eval_set = split(samples, cfg.eval_fraction)
    Fa, Fs, y, hot = stack(train_set)
    params = init_params(cfg)
    if uses_top(cfg.variant) and cfg.head_mode == "frozen":
        pretrain_heads(params, Fa, Fs, y, hot, cfg)
    initial = {k: v.copy() for k, v in params.items()}
    names = trainable_names(params, cfg)
    state = AdamState()
    rng = batch_stream(cfg.seed)
    n = len(train_set)
    bs = min(cfg.batch_size, n)
    order, pos = rng.permutation(n), 0
    history = []
    for step in range(cfg.steps + 1):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        yb = y[idx]
        loss, cache = forward_loss(Fa[idx], Fs[idx], params, cfg, yb)
        grads, aux = backward(cache, params, yb, cfg)
        art2sem, sem2art = flow_metrics(cache, aux)
        acc = float(np.mean((cache["logits"] > 0) == (yb > 0.5)))
        history.append({"step": step, "variant": cfg.variant, "loss": loss, "accuracy": acc,
                        "S_art2sem": art2sem, "S_sem2art": sem2art})
        if step < cfg.steps:
            adam_step(params, grads, state, cfg.learning_rate, names)
        if step % 100 == 0:
            log.debug("%s step %d loss %.4f", cfg.variant, step, loss)
    Ea, Es, ey, _ = stack(eval_set)
    ev = evaluate(params, cfg, Ea, Es, ey)
    tr = evaluate(params, cfg, Fa, Fs, y)
    final = {"variant": cfg.variant, "params": param_count(cfg), "train_loss": tr["loss"],
             "train_accuracy": tr["accuracy"], "eval_loss": ev["loss"],
             "eval_accuracy": ev["accuracy"], "S_art2sem": tr["S_art2sem"],
             "S_sem2art": tr["S_sem2art"]}
    return TrainResult(cfg, params, history, final, initial)


def run_ablation(variant: str, samples, cfg: AdapterConfig) -> TrainResult:
    if variant not in VARIANTS:
        raise UsageError(f"unknown ablation variant '{variant}'; expected one of {VARIANTS}")
    return train(replace(cfg, variant=variant), samples)


def run_all_ablations(samples, cfg: AdapterConfig) -> dict:
    return {v: run_ablation(v, samples, cfg) for v in VARIANTS}


def fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or np.isnan(x):
        return "nan"
    return f"{float(x):.10g}"


def rows_to_csv(rows, columns) -> str:
    lines = [",".join(columns)]
    lines += [",".join(fmt(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"
