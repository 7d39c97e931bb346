"""Run configuration: one JSON document with a top-level seed and four sections.

    {
      "seed": 0,
      "synth":     {SynthConfig fields except seed},
      "adapter":   {AdapterConfig fields except seed and transport},
      "transport": {TransportConfig fields},
      "probe":     {ProbeConfig fields except seed}
    }

Every key is optional; unknown keys are rejected with the dotted key path.
The effective seed is chosen as: command-line flag, then the TXA_SEED
environment variable, then the document's "seed", then 0.  It seeds the
generator, the adapter and the probe alike.
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path

from .adapter import AdapterConfig
from .errors import ConfigError, ContractError
from .probe import ProbeConfig
from .synthgen import SynthConfig
from .transport import TransportConfig

SEED_ENV = "TXA_SEED"
SECTIONS = {
    "synth": (SynthConfig, {"seed"}),
    "adapter": (AdapterConfig, {"seed", "transport"}),
    "transport": (TransportConfig, set()),
    "probe": (ProbeConfig, {"seed"}),
}


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def transport(self) -> TransportConfig:
        return self.adapter.transport

    def to_dict(self) -> dict:
        adapter = asdict(self.adapter)
        transport = adapter.pop("transport")
        for d in (adapter,):
            d.pop("seed")
        synth, probe = asdict(self.synth), asdict(self.probe)
        synth.pop("seed")
        probe.pop("seed")
        return {"seed": self.seed, "synth": synth, "adapter": adapter,
                "transport": transport, "probe": probe}


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _check_value(key: str, value, default):
    """Type-check one JSON value against the type of the field's default."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "a boolean"
    elif isinstance(default, int) or default is None:
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "an integer"
        if default is None:
            ok = ok or value is None
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "a number"
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
        want = "a string"
    else:
        ok, want = True, ""
    if not ok:
        raise ConfigError(key, f"expected {want}, got {json.dumps(value)}")
    return value


def _section(name: str, raw, seed: int, extra: dict | None = None):
    cls, hidden = SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(name, "section must be a JSON object")
    allowed = {f.name: f for f in fields(cls) if f.name not in hidden}
    kwargs = {}
    for key, value in raw.items():
        if key not in allowed:
            hint = " (use the top-level 'seed')" if key == "seed" else ""
            raise ConfigError(f"{name}.{key}", f"unknown key{hint}")
        kwargs[key] = _check_value(f"{name}.{key}", value, _default_of(allowed[key]))
    if "seed" in {f.name for f in fields(cls)}:
        kwargs["seed"] = seed
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ContractError as exc:
        raise ConfigError(name, str(exc)) from exc


def resolve_seed(doc_seed, flag_seed=None, environ=None) -> int:
    """Precedence: flag > TXA_SEED > document > 0."""
    environ = os.environ if environ is None else environ
    if flag_seed is not None:
        return int(flag_seed)
    env = environ.get(SEED_ENV)
    if env is not None and env.strip() != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, f"environment seed must be an integer, got '{env}'") from None
    if doc_seed is not None:
        return doc_seed
    return 0


def parse_config(doc: dict, flag_seed=None, environ=None) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    for key in doc:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(key, "unknown key")
    doc_seed = doc.get("seed")
    if doc_seed is not None:
        _check_value("seed", doc_seed, 0)
    seed = resolve_seed(doc_seed, flag_seed, environ)
    if seed < 0 or seed >= 2**64:
        raise ConfigError("seed", "must lie in [0, 2^64)")
    transport = _section("transport", doc.get("transport", {}), seed)
    return RunConfig(
        seed=seed,
        synth=_section("synth", doc.get("synth", {}), seed),
        adapter=_section("adapter", doc.get("adapter", {}), seed, {"transport": transport}),
        probe=_section("probe", doc.get("probe", {}), seed),
    )


def load_config(path=None, flag_seed=None, environ=None) -> RunConfig:
    """Read and validate a config file; ``path=None`` gives the defaults."""
    if path is None:
        return parse_config({}, flag_seed, environ)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ContractError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    try:
        return parse_config(doc, flag_seed, environ)
    except ConfigError as exc:
        raise ConfigError(exc.key, f"{exc.args[0].split(': ', 1)[1]} (in {path})") from exc


def with_overrides(cfg: RunConfig, **adapter_overrides) -> RunConfig:
    return replace(cfg, adapter=replace(cfg.adapter, **adapter_overrides))
