"""Central finite-difference verification of the analytic adapter gradients.

Under ``ot_grad="stop"`` the finite differences reuse the solved plan
(``gamma_override``) so that they differentiate the same stop-gradient
function the backward pass does; under ``"unroll"`` they pin each item's
Sinkhorn iteration count (``fixed_iters``) so the unrolled graph is fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import (AdapterConfig, backward, forward_loss, init_params,
                      trainable_names, uses_top)
from .tensor import RandomSource

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-5
PERTURB = 0.3


def relative_error(ga, gfd):
    ga, gfd = np.asarray(ga), np.asarray(gfd)
    return np.abs(ga - gfd) / np.maximum(1e-8, np.abs(ga) + np.abs(gfd))


@dataclass
class GradCheckReport:
    variant: str
    ot_grad: str
    log_domain: bool
    h: float
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        head = (f"variant={self.variant} ot_grad={self.ot_grad} log_domain={self.log_domain} "
                f"h={self.h:g} tol={self.tolerance:g} max_rel_err={self.max_error:.3e} "
                f"{'PASS' if self.passed else 'FAIL'}")
        body = [f"  {name:<24s} {err:.3e}{'' if err <= self.tolerance else '  FAIL'}"
                for name, err in self.errors.items()]
        return [head] + body


def tiny_config(variant: str = "full", ot_grad: str = "stop", log_domain: bool = False,
                seed: int = 0) -> AdapterConfig:
    cfg = AdapterConfig(D=8, d=4, L=2, head_mode="trainable", ot_grad=ot_grad,
                        variant=variant, seed=seed)
    return replace(cfg, transport=replace(cfg.transport, log_domain=log_domain))


def tiny_problem(cfg: AdapterConfig, batch: int = 3, N: int = 4, M: int = 4):
    """Random inputs, labels and parameters with the all-zero blocks moved off zero.

    Zero-initialized output layers and biases would otherwise zero most
    upstream gradients and make the check vacuous.
    """
    rng = RandomSource(cfg.seed + 1)
    F_art = rng.normal_matrix(batch * N, cfg.D).reshape(batch, N, cfg.D)
    F_sem = rng.normal_matrix(batch * M, cfg.D).reshape(batch, M, cfg.D)
    labels = (np.arange(batch) % 2).astype(np.float64)
    params = init_params(cfg)
    for k in sorted(params):
        if np.any(params[k]):
            continue
        params[k] = params[k] + PERTURB * rng.gaussian(params[k].size).reshape(params[k].shape)
    return F_art, F_sem, labels, params


def check_gradients(cfg: AdapterConfig, F_art, F_sem, labels, params: dict,
                    h: float = DEFAULT_H, tolerance: float = DEFAULT_TOL) -> GradCheckReport:
    _, cache = forward_loss(F_art, F_sem, params, cfg, labels)
    grads, _ = backward(cache, params, labels, cfg)
    kw = {}
    if uses_top(cfg.variant):
        if cfg.ot_grad == "stop":
            kw["gamma_override"] = cache["gamma"]
        else:
            kw["fixed_iters"] = cache["plan"].iters_used
    report = GradCheckReport(cfg.variant, cfg.ot_grad, cfg.transport.log_domain, h, tolerance)
    for name in trainable_names(params, cfg):
        arr = params[name]
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp, _ = forward_loss(F_art, F_sem, params, cfg, labels, **kw)
            arr[idx] = orig - h
            lm, _ = forward_loss(F_art, F_sem, params, cfg, labels, **kw)
            arr[idx] = orig
            fd[idx] = (lp - lm) / (2 * h)
        report.errors[name] = float(relative_error(grads[name], fd).max()) if arr.size else 0.0
    return report


STANDARD_CASES = (
    ("full", "stop", False),
    ("full", "unroll", False),
    ("full", "unroll", True),
    ("cross_replaces_top", "stop", False),
)


def run_gradcheck(seed: int = 0, h: float = DEFAULT_H, tolerance: float = DEFAULT_TOL,
                  cases=STANDARD_CASES) -> list[GradCheckReport]:
    """Tiny configuration (N = M = 4, D = 8, d = 4, L = 2) under each case."""
    out = []
    for variant, ot_grad, log_domain in cases:
        cfg = tiny_config(variant, ot_grad, log_domain, seed)
        F_art, F_sem, labels, params = tiny_problem(cfg)
        out.append(check_gradients(cfg, F_art, F_sem, labels, params, h, tolerance))
    return out
