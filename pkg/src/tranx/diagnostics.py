"""Attention-dilution and information-flow diagnostics.

Relative entropy of an attention row is H(row) / log(n): 1 for a uniform row,
0 for a one-hot row.  Information-flow significance of a block of attention
positions is the mean of |A * dL/dA| over that block.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInputError, UsageError

HIST_BINS = 20
DEPTH_BUCKETS = ("low", "middle", "high")
SURROGATES = {
    "S_text": "learned instruction-token group of the attention probe (no text encoder)",
    "S_image": "all semantic and artifact tokens of the attention probe",
    "loss": "binary cross-entropy of a self-attention probe replaces the language-model objective",
}


def relative_entropy(row) -> float:
    """Shannon entropy of a probability vector divided by log(len(row))."""
    return float(relative_entropy_rows(np.asarray(row, dtype=np.float64)[None, :])[0])


def relative_entropy_rows(A: np.ndarray) -> np.ndarray:
    """Row-wise relative entropy over the last axis; rows must sum to 1 within 1e-8."""
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[-1]
    if n < 2:
        raise DegenerateInputError("relative entropy is undefined for a single outcome")
    if np.any(np.abs(A.sum(axis=-1) - 1.0) > 1e-8) or np.any(A < 0):
        raise DegenerateInputError("relative entropy needs rows that are probability vectors")
    safe = np.where(A > 0, A, 1.0)
    H = -np.sum(np.where(A > 0, A * np.log(safe), 0.0), axis=-1)
    return np.clip(H / np.log(n), 0.0, 1.0)


def renormalized_block(A: np.ndarray, rows: slice, cols: slice) -> np.ndarray:
    """Sub-block of an attention map with each row rescaled to sum to one."""
    sub = A[..., rows, cols]
    return sub / sub.sum(axis=-1, keepdims=True)


def entropy_histogram(values: np.ndarray) -> list[int]:
    counts, _ = np.histogram(np.asarray(values).reshape(-1), bins=HIST_BINS, range=(0.0, 1.0))
    return [int(c) for c in counts]


def feature_variance_stats(F) -> tuple[float, float]:
    """(variance of row L2 norms, variance of cosine similarity over row pairs).

    Both are population variances; the cosine variance runs over all
    unordered pairs of distinct rows.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise DegenerateInputError("feature variance needs at least two patches")
    norms = np.linalg.norm(F, axis=1)
    if np.any(norms == 0):
        raise DegenerateInputError("feature variance: zero-norm row has no cosine similarity")
    U = F / norms[:, None]
    iu = np.triu_indices(F.shape[0], k=1)
    cos = (U @ U.T)[iu]
    return float(np.var(norms)), float(np.var(cos))


def batch_variance_stats(F) -> np.ndarray:
    """feature_variance_stats for every item of a (B, n, D) stack, as a (B, 2) array."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[1] < 2:
        raise DegenerateInputError("feature variance needs (B, n >= 2, D) input")
    norms = np.linalg.norm(F, axis=2)
    if np.any(norms == 0):
        raise DegenerateInputError("feature variance: zero-norm row has no cosine similarity")
    U = F / norms[:, :, None]
    iu = np.triu_indices(F.shape[1], k=1)
    cos = np.einsum("bid,bjd->bij", U, U)[:, iu[0], iu[1]]
    return np.stack([norms.var(axis=1), cos.var(axis=1)], axis=1)


def mean_pairwise_cosine(F) -> float:
    F = np.asarray(F, dtype=np.float64)
    U = F / np.linalg.norm(F, axis=1, keepdims=True)
    iu = np.triu_indices(F.shape[0], k=1)
    return float(np.mean((U @ U.T)[iu]))


def info_flow_significance(A, dLdA, block=None) -> float:
    """Mean of |A * dL/dA| over the positions selected by ``block``.

    ``block`` is a boolean mask broadcastable to A (None selects everything).
    With several heads, pass arrays with a leading head axis summed by the
    caller before this call.
    """
    A = np.asarray(A, dtype=np.float64)
    G = np.asarray(dLdA, dtype=np.float64)
    if A.shape != G.shape:
        raise UsageError(f"attention map {A.shape} and gradient {G.shape} differ in shape")
    sal = np.abs(A * G)
    if block is None:
        return float(sal.mean())
    mask = np.broadcast_to(np.asarray(block, dtype=bool), sal.shape)
    if not mask.any():
        raise UsageError("information-flow block selects no positions")
    return float(sal[mask].mean())


@dataclass
class DiagnosticsReport:
    """Stable JSON schema emitted by ``tranx diagnose``."""

    mean_relative_entropy: dict = field(default_factory=dict)
    mean_relative_entropy_by_layer: dict = field(default_factory=dict)
    relative_entropy_histogram: dict = field(default_factory=dict)
    S_art2sem: float = 0.0
    S_sem2art: float = 0.0
    S_text: float = 0.0
    S_image: float = 0.0
    S_top: float | None = None
    S_cross: float | None = None
    S_by_depth: dict = field(default_factory=dict)
    var_l2: dict = field(default_factory=dict)
    var_cos: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    surrogates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def depth_bucket(layer: int, n_layers: int) -> str:
    """Low / middle / high third of the layer stack; layer 0 is nearest the input."""
    return DEPTH_BUCKETS[min(2, (3 * layer) // n_layers)]


def _block_S(maps, dmaps, rows, cols) -> list[float]:
    return [info_flow_significance(A[:, rows, cols], G[:, rows, cols]) for A, G in zip(maps, dmaps)]


def dilution_probe(F_sem, F_art, labels, probe_params, per_row: list | None = None) -> DiagnosticsReport:
    """Attention-probe diagnostics over a batch of raw (unfused) features.

    Directions are named by the key group: ``art_keys`` rows are semantic
    queries over the artifact keys, ``sem_keys`` rows are artifact queries
    over the semantic keys, each block renormalized to sum to one.  S values
    use per-sample losses, so they do not shrink with the batch size.
    ``art2sem`` is the flow from artifact keys into semantic queries.
    When ``per_row`` is a list, one dict per attention row is appended to it.
    """
    from .probe import probe_gradients

    F_sem = np.asarray(F_sem, dtype=np.float64)
    F_art = np.asarray(F_art, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    _, _, maps, dmaps, cache = probe_gradients(F_sem, F_art, probe_params, labels)
    lay = cache["layout"]
    cls = slice(lay.cls, lay.cls + 1)
    blocks = {"art_keys": (lay.sem, lay.art), "sem_keys": (lay.art, lay.sem)}
    report = DiagnosticsReport(surrogates=dict(SURROGATES))
    for name, (rows, cols) in blocks.items():
        ents = [relative_entropy_rows(renormalized_block(A, rows, cols)) for A in maps]
        report.mean_relative_entropy_by_layer[name] = [float(e.mean()) for e in ents]
        report.mean_relative_entropy[name] = float(np.mean([e.mean() for e in ents]))
        report.relative_entropy_histogram[name] = entropy_histogram(np.concatenate([e.reshape(-1) for e in ents]))
        if per_row is not None:
            for layer, e in enumerate(ents):
                for b, r in np.ndindex(e.shape):
                    per_row.append({"direction": name, "layer": layer, "sample": b, "row": r,
                                    "relative_entropy": float(e[b, r])})
    flows = {
        "art2sem": _block_S(maps, dmaps, lay.sem, lay.art),
        "sem2art": _block_S(maps, dmaps, lay.art, lay.sem),
        "text": _block_S(maps, dmaps, cls, lay.text),
        "image": _block_S(maps, dmaps, cls, lay.visual),
    }
    report.S_art2sem = float(np.mean(flows["art2sem"]))
    report.S_sem2art = float(np.mean(flows["sem2art"]))
    report.S_text = float(np.mean(flows["text"]))
    report.S_image = float(np.mean(flows["image"]))
    n_layers = len(maps)
    for bucket in DEPTH_BUCKETS:
        idx = [l for l in range(n_layers) if depth_bucket(l, n_layers) == bucket]
        report.S_by_depth[bucket] = ({k: float(np.mean([v[l] for l in idx])) for k, v in flows.items()}
                                     if idx else None)
    for group, F in (("artifact", F_art), ("semantic", F_sem)):
        stats = batch_variance_stats(F)
        report.var_l2[group] = float(stats[:, 0].mean())
        report.var_cos[group] = float(stats[:, 1].mean())
    report.probe = {"layers": n_layers, "text_tokens": lay.T, "samples": int(len(labels))}
    return report
