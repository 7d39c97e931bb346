"""Entropic optimal transport between semantic rows and artifact columns.

Marginals are uniform: a_i = 1/M over rows, b_j = 1/N over columns.  All
routines accept a leading batch axis; each batch item keeps its own
convergence state so batched and one-at-a-time solves are identical.

Plain alternating scaling converges linearly, and on small, nearly sparse
plans (4 x 4 at eps = 0.05, say) the rate can be so close to one that tens
of thousands of sweeps are needed.  Items still unconverged after
``newton_after`` sweeps therefore switch to damped Newton steps on the dual
potentials, each followed by an exact column rescale.  Unrolled solves
(``record`` or ``fixed_iters``) never switch, so their graph stays a plain
chain of scaling sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .tensor import swap


@dataclass
class TransportConfig:
    epsilon: float = 0.1
    max_iters: int = 1000
    tol: float = 1e-6
    log_domain: bool = False
    # sweeps before Newton polishing; >= max_iters gives plain Sinkhorn
    newton_after: int = 50

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ContractError(f"transport epsilon must be > 0, got {self.epsilon}")
        if not (self.tol > 0):
            raise ContractError(f"transport tol must be > 0, got {self.tol}")
        if int(self.max_iters) < 1:
            raise ContractError(f"transport max_iters must be >= 1, got {self.max_iters}")
        self.max_iters = int(self.max_iters)
        if int(self.newton_after) < 1:
            raise ContractError(f"transport newton_after must be >= 1, got {self.newton_after}")


@dataclass
class TransportPlan:
    gamma: np.ndarray
    converged: np.ndarray
    iters_used: np.ndarray
    max_violation: np.ndarray
    # per-iteration potentials, kept only when the caller asks for them
    trace: list = field(default=None, repr=False)
    log_domain: bool = False
    epsilon: float = 0.1

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def _as_batch(C):
    C = np.asarray(C, dtype=np.float64)
    if C.ndim < 2:
        raise ContractError(f"sinkhorn: cost must be a matrix, got shape {C.shape}")
    if not np.all(np.isfinite(C)):
        raise ContractError("sinkhorn: cost matrix contains non-finite entries")
    return C.reshape((-1,) + C.shape[-2:]), C.shape[:-2]


def _dual_value(Cb, f, g, a, b, eps):
    with np.errstate(over="ignore"):
        mass = np.exp((f[:, :, None] + g[:, None, :] - Cb) / eps).sum(axis=(1, 2))
    return a * f.sum(axis=1) + b * g.sum(axis=1) - eps * mass


def _column_update(Cb, f, a_or_b, eps):
    return eps * np.log(a_or_b) - eps * _lse((f[:, :, None] - Cb) / eps, axis=1)


def _row_violation(Cb, f, g, a, eps):
    row = np.exp(_lse((f[:, :, None] + g[:, None, :] - Cb) / eps, axis=2))
    return np.abs(row - a).max(axis=1)


def _newton_polish(Cb, f, g, iters, active, viol, cfg):
    """Damped Newton ascent on the dual, one column rescale per step.

    The Hessian of the dual in (f, g) is -(1/eps) [[diag r, P], [P^T, diag c]];
    it is singular along (1, -1), which the solve removes by pinning the
    last column potential.
    """
    B, M, N = Cb.shape
    eps = cfg.epsilon
    a, b = 1.0 / M, 1.0 / N
    f, g = f.copy(), g.copy()
    while active.any():
        idx = np.flatnonzero(active)
        C, fi, gi = Cb[idx], f[idx], g[idx]
        P = np.exp((fi[:, :, None] + gi[:, None, :] - C) / eps)
        r, c = P.sum(axis=2), P.sum(axis=1)
        H = np.zeros((len(idx), M + N - 1, M + N - 1))
        H[:, :M, :M] = r[:, :, None] * np.eye(M)
        H[:, M:, M:] = c[:, :N - 1, None] * np.eye(N - 1)
        H[:, :M, M:] = P[:, :, :N - 1]
        H[:, M:, :M] = swap(P[:, :, :N - 1])
        rhs = eps * np.concatenate([a - r, (b - c)[:, :N - 1]], axis=1)
        try:
            step = np.linalg.solve(H, rhs[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.einsum("bij,bj->bi", np.linalg.pinv(H), rhs)
        df = step[:, :M]
        dg = np.concatenate([step[:, M:], np.zeros((len(idx), 1))], axis=1)
        base = _dual_value(C, fi, gi, a, b, eps)
        t = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        for _ in range(40):
            fn, gn = fi + t[:, None] * df, gi + t[:, None] * dg
            ok = _dual_value(C, fn, gn, a, b, eps) >= base
            pending &= ~ok
            if not pending.any():
                break
            t = np.where(pending, 0.5 * t, t)
        t = np.where(pending, 0.0, t)
        fn = fi + t[:, None] * df
        gn = _column_update(C, fn, b, eps)
        f[idx], g[idx] = fn, gn
        iters[idx] += 1
        viol[idx] = _row_violation(C, fn, gn, a, eps)
        active = active & (viol > cfg.tol) & (iters < cfg.max_iters)
    return f, g


def sinkhorn(C, cfg: TransportConfig | None = None, *, fixed_iters=None,
             record: bool = False) -> TransportPlan:
    """Scale exp(-C/eps) to the uniform marginals by alternating u, v updates.

    Stops per item once the row-marginal violation drops to cfg.tol (the
    column marginal is exact after every v update) or after cfg.max_iters.
    ``fixed_iters`` (int or per-item array) forces an exact iteration count,
    which the unrolled backward and its finite-difference checks rely on.
    Without either of ``fixed_iters`` and ``record``, items still active
    after cfg.newton_after sweeps finish with Newton steps (see module notes).
    """
    cfg = cfg or TransportConfig()
    Cb, lead = _as_batch(C)
    B, M, N = Cb.shape
    eps = cfg.epsilon
    a, b = 1.0 / M, 1.0 / N
    if fixed_iters is not None:
        fixed = np.broadcast_to(np.asarray(fixed_iters, dtype=np.int64).reshape(-1), (B,))
        if np.any(fixed < 1):
            raise ContractError("sinkhorn: fixed_iters must be >= 1")
    plain = record or fixed_iters is not None
    sweep_limit = cfg.max_iters if plain else min(cfg.max_iters, cfg.newton_after)
    trace = [] if record else None
    iters = np.zeros(B, dtype=np.int64)
    active = np.ones(B, dtype=bool)

    if cfg.log_domain:
        f = np.zeros((B, M))
        g = np.zeros((B, N))
        log_a, log_b = np.log(a), np.log(b)
        while True:
            f_new = eps * log_a - eps * _lse((g[:, None, :] - Cb) / eps, axis=2)
            f = np.where(active[:, None], f_new, f)
            g_new = eps * log_b - eps * _lse((f[:, :, None] - Cb) / eps, axis=1)
            g = np.where(active[:, None], g_new, g)
            iters += active
            if record:
                trace.append((f, g, active.copy()))
            viol = _row_violation(Cb, f, g, a, eps)
            if fixed_iters is not None:
                active = iters < fixed
            else:
                active = active & (viol > cfg.tol) & (iters < sweep_limit)
            if not active.any():
                break
    else:
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            K = np.exp(-Cb / eps)
        if not np.all(np.isfinite(K)) or np.any(K.sum(axis=2) == 0) or np.any(K.sum(axis=1) == 0):
            raise NumericError(
                f"sinkhorn: kernel exp(-C/eps) over/underflows at eps={eps}; "
                "enable log_domain for small epsilon"
            )
        KT = swap(K)
        u = np.zeros((B, M))
        v = np.ones((B, N))
        Kv = np.einsum("bij,bj->bi", K, v)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            while True:
                u = np.where(active[:, None], a / Kv, u)
                v = np.where(active[:, None], b / np.einsum("bji,bi->bj", KT, u), v)
                iters += active
                if record:
                    trace.append((u, v, active.copy()))
                Kv = np.einsum("bij,bj->bi", K, v)
                viol = np.abs(u * Kv - a).max(axis=1)
                if fixed_iters is not None:
                    active = iters < fixed
                else:
                    active = active & (viol > cfg.tol) & (iters < sweep_limit)
                if not np.all(np.isfinite(viol)):
                    raise NumericError(
                        f"sinkhorn: scaling vectors overflowed at eps={eps}; "
                        "enable log_domain for small epsilon"
                    )
                if not active.any():
                    break

    polish = np.zeros(B, dtype=bool)
    if not plain:
        polish = (viol > cfg.tol) & (iters < cfg.max_iters)
    if polish.any():
        if not cfg.log_domain:
            with np.errstate(divide="ignore"):
                f, g = eps * np.log(u), eps * np.log(v)
        f, g = _newton_polish(Cb, f, g, iters, polish.copy(), viol, cfg)

    if cfg.log_domain:
        gamma = np.exp((f[:, :, None] + g[:, None, :] - Cb) / eps)
    else:
        gamma = u[:, :, None] * K * v[:, None, :]
        if polish.any():
            gamma[polish] = np.exp((f[polish][:, :, None] + g[polish][:, None, :] - Cb[polish]) / eps)

    if not np.all(np.isfinite(gamma)):
        raise NumericError(
            f"sinkhorn: non-finite transport plan at eps={eps}; enable log_domain"
        )
    return TransportPlan(
        gamma=gamma.reshape(lead + (M, N)),
        converged=(viol <= cfg.tol).reshape(lead),
        iters_used=iters.reshape(lead),
        max_violation=viol.reshape(lead),
        trace=trace,
        log_domain=cfg.log_domain,
        epsilon=eps,
    )


def sinkhorn_backward(C, plan: TransportPlan, dgamma) -> np.ndarray:
    """dL/dC by reverse-mode differentiation of the executed iterations.

    Requires a plan produced with ``record=True``.
    """
    if plan.trace is None:
        raise ContractError("sinkhorn_backward: plan was solved without record=True")
    Cb, lead = _as_batch(C)
    B, M, N = Cb.shape
    eps = plan.epsilon
    G = np.asarray(dgamma, dtype=np.float64).reshape(B, M, N)
    gamma = plan.gamma.reshape(B, M, N)
    trace = plan.trace

    if plan.log_domain:
        w = G * gamma / eps
        dC = -w
        df = w.sum(axis=2)
        dg = w.sum(axis=1)
        for t in range(len(trace) - 1, -1, -1):
            f_t, g_t, act = trace[t]
            g_prev = trace[t - 1][1] if t > 0 else np.zeros((B, N))
            am = act[:, None]
            # g_t = eps log b - eps LSE_i((f_t - C)/eps)
            Q = np.exp((f_t[:, :, None] - Cb) / eps - _lse((f_t[:, :, None] - Cb) / eps, axis=1)[:, None, :])
            dg_act = np.where(am, dg, 0.0)
            df = df - np.einsum("bij,bj->bi", Q, dg_act)
            dC += Q * dg_act[:, None, :]
            # f_t = eps log a - eps LSE_j((g_prev - C)/eps)
            P = np.exp((g_prev[:, None, :] - Cb) / eps - _lse((g_prev[:, None, :] - Cb) / eps, axis=2)[:, :, None])
            df_act = np.where(am, df, 0.0)
            dC += P * df_act[:, :, None]
            dg = np.where(am, -np.einsum("bij,bi->bj", P, df_act), dg)
            df = np.where(am, 0.0, df)
        return dC.reshape(lead + (M, N))

    K = np.exp(-Cb / eps)
    u_T, v_T, _ = trace[-1]
    GK = G * K
    du = np.einsum("bij,bj->bi", GK, v_T)
    dv = np.einsum("bij,bi->bj", GK, u_T)
    dK = G * u_T[:, :, None] * v_T[:, None, :]
    for t in range(len(trace) - 1, -1, -1):
        u_t, v_t, act = trace[t]
        v_prev = trace[t - 1][1] if t > 0 else np.ones((B, N))
        am = act[:, None]
        # v_t = b / (K^T u_t)
        s = np.einsum("bij,bi->bj", K, u_t)
        ds = np.where(am, -dv * v_t / s, 0.0)
        du = du + np.einsum("bij,bj->bi", K, ds)
        dK += u_t[:, :, None] * ds[:, None, :]
        # u_t = a / (K v_prev)
        r = np.einsum("bij,bj->bi", K, v_prev)
        dr = np.where(am, -du * u_t / r, 0.0)
        dK += dr[:, :, None] * v_prev[:, None, :]
        dv = np.where(am, np.einsum("bij,bi->bj", K, dr), dv)
        du = np.where(am, 0.0, du)
    return (-dK * K / eps).reshape(lead + (M, N))


def row_normalize(plan: TransportPlan | np.ndarray) -> np.ndarray:
    """M * gamma: every row becomes a convex combination over artifact patches."""
    gamma = plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan)
    return gamma.shape[-2] * gamma


def entropic_objective(gamma: np.ndarray, C: np.ndarray, eps: float) -> float:
    """<gamma, C> - eps * H(gamma) with H = -sum gamma log gamma."""
    g = np.asarray(gamma, dtype=np.float64)
    ent = -np.sum(np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0))
    return float(np.sum(g * C) - eps * ent)
