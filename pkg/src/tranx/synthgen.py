"""Synthetic artifact/semantic feature pairs.

Artifact rows share one base direction and differ only by small noise, so
they are nearly collinear.  Fake samples light up ``k`` hotspot rows along a
signal direction orthogonal to the base.  Semantic rows are distinct random
unit means plus larger noise, and fake samples shift them all slightly along
a second, weak signal direction.

Generation order, all drawn from one SplitMix64 stream:

1. base b, hotspot direction u (Gram-Schmidt against b), semantic direction w
   (each a normalized D-vector of standard normals);
2. labels: the first round(fake_fraction * n) positions are fake, then
   permuted by the stream;
3. per sample: artifact noise (N x D), hotspot indices (fake only),
   semantic means (M x D, rows normalized), semantic noise (M x D).

Noise entries are N(0, sigma^2) per coordinate.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError
from .io import atomic_write_text, read_tensor, write_tensor
from .tensor import RandomSource

MANIFEST = "manifest.json"


@dataclass
class SynthConfig:
    N: int = 16
    M: int = 16
    D: int = 32
    sigma_art: float = 0.05
    sigma_sem: float = 0.5
    k: int = 2
    s_art: float = 1.0
    s_sem: float = 0.1
    n_samples: int = 2048
    fake_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for key in ("N", "M"):
            if getattr(self, key) < 1:
                raise ConfigError(f"synth.{key}", "must be >= 1")
        if self.D < 2:
            raise ConfigError("synth.D", "must be >= 2 (the hotspot direction is orthogonal to the base)")
        if not 1 <= self.k <= self.N:
            raise ConfigError("synth.k", f"must satisfy 1 <= k <= N={self.N}, got {self.k}")
        for key in ("sigma_art", "sigma_sem"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"synth.{key}", "noise scale must be > 0")
        if not 0 <= self.fake_fraction <= 1:
            raise ConfigError("synth.fake_fraction", "must lie in [0, 1]")
        if self.n_samples < 0:
            raise ConfigError("synth.n_samples", "must be >= 0")


@dataclass
class Sample:
    F_art: np.ndarray
    F_sem: np.ndarray
    label: int
    hotspot_indices: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.label = int(self.label)
        self.hotspot_indices = tuple(int(i) for i in self.hotspot_indices)
        if self.label not in (0, 1):
            raise ContractError(f"sample label must be 0 or 1, got {self.label}")
        if bool(self.hotspot_indices) != (self.label == 1):
            raise ContractError("hotspot indices must be non-empty exactly for fake samples")
        if any(not 0 <= i < self.F_art.shape[0] for i in self.hotspot_indices):
            raise ContractError("hotspot index out of range")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def directions(rng: RandomSource, D: int):
    b = _unit(rng.gaussian(D))
    u = rng.gaussian(D)
    u = _unit(u - (u @ b) * b)
    w = _unit(rng.gaussian(D))
    return b, u, w


def generate(cfg: SynthConfig) -> list[Sample]:
    rng = RandomSource(cfg.seed)
    b, u, w = directions(rng, cfg.D)
    n = cfg.n_samples
    n_fake = int(round(cfg.fake_fraction * n))
    labels = np.zeros(n, dtype=int)
    labels[:n_fake] = 1
    labels = labels[rng.permutation(n)] if n else labels
    samples = []
    for label in labels:
        F_art = b + cfg.sigma_art * rng.normal_matrix(cfg.N, cfg.D)
        hot = ()
        if label:
            hot = tuple(rng.choice(cfg.N, cfg.k))
            F_art[list(hot)] += cfg.s_art * u
        mu = _unit(rng.normal_matrix(cfg.M, cfg.D))
        F_sem = mu + cfg.sigma_sem * rng.normal_matrix(cfg.M, cfg.D)
        if label:
            F_sem = F_sem + cfg.s_sem * w
        samples.append(Sample(F_art, F_sem, int(label), hot))
    return samples


def stack(samples):
    """Batch arrays (F_art, F_sem, labels, hotspot mask) from a sample list."""
    F_art = np.stack([s.F_art for s in samples])
    F_sem = np.stack([s.F_sem for s in samples])
    labels = np.array([s.label for s in samples], dtype=np.float64)
    mask = np.zeros(F_art.shape[:2], dtype=bool)
    for i, s in enumerate(samples):
        mask[i, list(s.hotspot_indices)] = True
    return F_art, F_sem, labels, mask


def write_dataset(samples, path, cfg: SynthConfig | None = None) -> None:
    """Per-sample tensor files plus a JSON manifest written last."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        art, sem = f"{i:06d}_art.txa", f"{i:06d}_sem.txa"
        write_tensor(path / art, s.F_art)
        write_tensor(path / sem, s.F_sem)
        entries.append({"art": art, "sem": sem, "label": s.label,
                        "hotspots": list(s.hotspot_indices)})
    manifest = {"format": "tranx-dataset", "version": 1, "count": len(entries),
                "synth_config": asdict(cfg) if cfg is not None else None,
                "samples": entries}
    atomic_write_text(path / MANIFEST, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    mpath = Path(path) / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise ContractError(f"{mpath}: cannot read manifest ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ContractError(f"{mpath}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if manifest.get("format") != "tranx-dataset" or "samples" not in manifest:
        raise ContractError(f"{mpath}: not a tranx dataset manifest")
    if manifest.get("count") != len(manifest["samples"]):
        raise ContractError(f"{mpath}: count does not match number of entries")
    return manifest


def read_dataset(path) -> list[Sample]:
    path = Path(path)
    manifest = read_manifest(path)
    out = []
    for entry in manifest["samples"]:
        out.append(Sample(read_tensor(path / entry["art"]), read_tensor(path / entry["sem"]),
                          entry["label"], entry["hotspots"]))
    return out
