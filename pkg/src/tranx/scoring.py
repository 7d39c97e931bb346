"""Per-patch fake probabilities and the pairwise Bernoulli JS cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensor import sigmoid

PROB_CLAMP = 1e-7
_LN2 = np.log(2.0)


@dataclass
class HeadParameters:
    w: np.ndarray
    b: float = 0.0

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ContractError("head parameters must be finite")


def clamp_prob(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def score_patches(F: np.ndarray, head: HeadParameters) -> np.ndarray:
    """sigmoid(F @ w + b) per row, clamped to [1e-7, 1 - 1e-7]."""
    F = np.asarray(F, dtype=np.float64)
    if F.shape[-1] != head.w.shape[0]:
        raise ContractError(
            f"score_patches: feature dim {F.shape[-1]} != head length {head.w.shape[0]}"
        )
    return clamp_prob(sigmoid(F @ head.w + head.b))


def score_patches_with_grad(F: np.ndarray, w: np.ndarray, b: float):
    """Probabilities plus d(prob)/d(logit); the derivative is 0 where clamped."""
    raw = sigmoid(np.asarray(F) @ w + b)
    p = clamp_prob(raw)
    dp = np.where(p == raw, raw * (1.0 - raw), 0.0)
    return p, dp


def _xlogy_ratio(x, y):
    return np.where(x > 0, x * np.log(np.where(x > 0, x, 1.0) / y), 0.0)


def js_bernoulli(p, q):
    """JS divergence between Bernoulli(p) and Bernoulli(q), base 2, in [0, 1].

    Arguments are ordered (min, max) before evaluation so that the result
    is bitwise symmetric.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    lo = np.minimum(p, q)
    hi = np.maximum(p, q)
    m1 = 0.5 * (lo + hi)
    m0 = 0.5 * ((1.0 - lo) + (1.0 - hi))
    kl_lo = _xlogy_ratio(lo, m1) + _xlogy_ratio(1.0 - lo, m0)
    kl_hi = _xlogy_ratio(hi, m1) + _xlogy_ratio(1.0 - hi, m0)
    js = np.clip(0.5 * (kl_lo + kl_hi) / _LN2, 0.0, 1.0)
    return js if js.ndim else float(js)


def js_bernoulli_grad(p, q):
    """Partial derivatives (dJS/dp, dJS/dq) of the base-2 divergence.

    With binary entropy H, JS = H((p+q)/2) - H(p)/2 - H(q)/2 and
    H'(x) = log2((1-x)/x).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)
    logit_m = np.log((1.0 - m) / m)
    dp = 0.5 * (logit_m - np.log((1.0 - p) / p)) / _LN2
    dq = 0.5 * (logit_m - np.log((1.0 - q) / q)) / _LN2
    return dp, dq


def cost_matrix(S: np.ndarray, P: np.ndarray) -> np.ndarray:
    """C[..., i, j] = -JS(S_i, P_j); semantic patches index rows."""
    S = np.asarray(S, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if S.shape[-1] < 1 or P.shape[-1] < 1:
        raise ContractError("cost_matrix: need at least one patch on each side")
    return -js_bernoulli(S[..., :, None], P[..., None, :])


def cost_matrix_backward(S: np.ndarray, P: np.ndarray, dC: np.ndarray):
    """Returns (dS, dP) for C = -JS(S_i, P_j)."""
    dS_ij, dP_ij = js_bernoulli_grad(S[..., :, None], P[..., None, :])
    return -(dC * dS_ij).sum(axis=-1), -(dC * dP_ij).sum(axis=-2)
