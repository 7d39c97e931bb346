"""Command-line entry point: ``tranx <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 contract/validation failure,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import VARIANTS, AdapterConfig, adapter_forward, init_params
from .config import RunConfig, load_config
from .diagnostics import dilution_probe
from .errors import ContractError, NumericError, TranxError, UsageError
from .gradcheck import DEFAULT_H, DEFAULT_TOL, run_gradcheck
from .io import (atomic_write_text, read_checkpoint, read_tensor,
                 write_checkpoint, write_tensor)
from .probe import train_probe
from .synthgen import generate, read_dataset, stack, write_dataset
from .train import (COMPARISON_COLUMNS, METRIC_COLUMNS, rows_to_csv,
                    run_all_ablations, train)
from .transport import TransportConfig, sinkhorn

log = logging.getLogger("tranx")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}" if " " in self.prog else message)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _clean(x):
    """NaN -> None so reports stay valid JSON."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _config(args) -> RunConfig:
    cfg = load_config(args.config, getattr(args, "seed", None))
    steps = getattr(args, "steps", None)
    if steps is not None:
        if steps < 0:
            raise UsageError("--steps must be >= 0")
        cfg = replace(cfg, adapter=replace(cfg.adapter, steps=steps))
    variant = getattr(args, "variant", None)
    if variant is not None:
        cfg = replace(cfg, adapter=replace(cfg.adapter, variant=variant))
    return cfg


def _samples(args, cfg: RunConfig):
    if getattr(args, "data", None):
        return read_dataset(args.data)
    return generate(cfg.synth)


# -- subcommands -----------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _config(args)
    samples = generate(cfg.synth)
    write_dataset(samples, args.out, cfg.synth)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg.adapter, _samples(args, cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "metrics.csv", rows_to_csv(result.history, METRIC_COLUMNS))
    write_checkpoint(out / "checkpoint.txck", result.params)
    write_checkpoint(out / "initial.txck", result.initial_params)
    atomic_write_text(out / "final.json", _json(_clean(result.final)))
    return 0


def _load_params(args, cfg: AdapterConfig) -> dict:
    params = init_params(cfg)
    if args.checkpoint:
        loaded = read_checkpoint(args.checkpoint)
        missing = sorted(set(params) - set(loaded))
        if missing:
            raise ContractError(f"{args.checkpoint}: missing blocks for variant "
                                f"'{cfg.variant}': {', '.join(missing)}")
        for k in params:
            if loaded[k].size != params[k].size:
                raise ContractError(f"{args.checkpoint}: block '{k}' has {loaded[k].size} "
                                    f"values, expected shape {params[k].shape}")
            params[k] = loaded[k].reshape(params[k].shape)
    return params


def cmd_fuse(args) -> int:
    F_art, F_sem = read_tensor(args.art), read_tensor(args.sem)
    if F_art.shape[1] != F_sem.shape[1]:
        raise ContractError(f"{args.art} has {F_art.shape[1]} columns but {args.sem} has {F_sem.shape[1]}")
    cfg = _config(args)
    variant = "top_only" if args.direction == "art2sem" else "x_only"
    acfg = replace(cfg.adapter, D=F_art.shape[1], d=cfg.adapter.d if args.d is None else args.d,
                   variant=variant)
    if args.d is None and cfg.adapter.D != F_art.shape[1]:
        acfg = replace(acfg, d=max(1, F_art.shape[1] // 2))
    params = _load_params(args, acfg)
    sem_hat, art_hat, cache = adapter_forward(F_art, F_sem, params, acfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.direction == "art2sem":
        write_tensor(out / "fused_sem.txa", sem_hat[0])
        write_tensor(out / "plan.txa", cache["gamma"][0])
        plan = cache["plan"]
        meta = {"converged": bool(plan.converged[0]), "iters_used": int(plan.iters_used[0]),
                "max_violation": float(plan.max_violation[0]),
                "transport": asdict(acfg.transport)}
        atomic_write_text(out / "plan.json", _json(meta))
    else:
        write_tensor(out / "fused_art.txa", art_hat[0])
        for layer, A in enumerate(cache["x_attention"]):
            write_tensor(out / f"attention_l{layer}.txa", A[0])
    return 0


def cmd_diagnose(args) -> int:
    cfg = _config(args)
    samples = _samples(args, cfg)
    if not samples:
        raise ContractError("diagnose needs at least one sample")
    F_art, F_sem, labels, _ = stack(samples)
    probe_params, losses = train_probe(F_sem, F_art, labels, cfg.probe)
    n_eval = len(samples) if args.max_samples is None else min(args.max_samples, len(samples))
    rows = [] if args.rows else None
    report = dilution_probe(F_sem[:n_eval], F_art[:n_eval], labels[:n_eval], probe_params, rows)
    report.probe.update({"steps": cfg.probe.steps,
                         "final_train_loss": losses[-1] if losses else None})
    if args.compare_transfer:
        finals = {v: train(replace(cfg.adapter, variant=v), samples).final
                  for v in ("full", "cross_replaces_top")}
        report.S_top = finals["full"]["S_art2sem"]
        report.S_cross = finals["cross_replaces_top"]["S_art2sem"]
    atomic_write_text(args.out, _json(_clean(report.to_dict())))
    if rows is not None:
        cols = ("direction", "layer", "sample", "row", "relative_entropy")
        atomic_write_text(args.rows, rows_to_csv(rows, cols))
    return 0


def cmd_sinkhorn(args) -> int:
    C = read_tensor(args.cost)
    cfg = load_config(args.config).transport if args.config else TransportConfig()
    over = {k: v for k, v in (("epsilon", args.epsilon), ("max_iters", args.max_iters),
                              ("tol", args.tol)) if v is not None}
    if args.log_domain:
        over["log_domain"] = True
    cfg = replace(cfg, **over)
    plan = sinkhorn(C, cfg)
    write_tensor(args.out, plan.gamma)
    meta = {"converged": bool(plan.converged), "iters_used": int(plan.iters_used),
            "max_violation": float(plan.max_violation), "rows": int(C.shape[0]),
            "cols": int(C.shape[1]), "transport": asdict(cfg)}
    meta_path = args.meta or str(Path(args.out).with_suffix(".json"))
    atomic_write_text(meta_path, _json(meta))
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(seed=0 if args.seed is None else args.seed, h=args.h, tolerance=args.tol)
    for r in reports:
        print("\n".join(r.lines()))
    return 0 if all(r.passed for r in reports) else NumericError.exit_code


def cmd_ablate(args) -> int:
    cfg = _config(args)
    results = run_all_ablations(_samples(args, cfg), cfg.adapter)
    rows = [results[v].final for v in VARIANTS]
    atomic_write_text(args.out, rows_to_csv(rows, COMPARISON_COLUMNS))
    if args.metrics:
        hist = [row for v in VARIANTS for row in results[v].history]
        atomic_write_text(args.metrics, rows_to_csv(hist, METRIC_COLUMNS))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tranx", description="Optimal-transport and cross-attention feature fusion toolkit.")
    p.add_argument("--version", action="version", version=f"tranx {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides TXA_SEED and the config seed")
        if data:
            sp.add_argument("--data", help="dataset directory (default: generate from the config)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one adapter variant")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--variant", choices=VARIANTS)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("fuse", help="fuse one artifact/semantic feature pair")
    common(sp, data=False)
    sp.add_argument("--art", required=True)
    sp.add_argument("--sem", required=True)
    sp.add_argument("--direction", required=True, choices=("art2sem", "sem2art"))
    sp.add_argument("--checkpoint")
    sp.add_argument("--d", type=int, help="shared width (default: config, or D/2)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_fuse)

    sp = sub.add_parser("diagnose", help="attention-dilution and information-flow report")
    common(sp)
    sp.add_argument("--out", required=True, help="report JSON path")
    sp.add_argument("--rows", help="optional per-row relative-entropy CSV")
    sp.add_argument("--max-samples", type=int, default=256,
                    help="samples evaluated after probe training (default 256)")
    sp.add_argument("--compare-transfer", action="store_true",
                    help="also train full and cross_replaces_top to fill S_top / S_cross")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("sinkhorn", help="solve entropic transport for a cost matrix file")
    sp.add_argument("--cost", required=True)
    sp.add_argument("--out", required=True, help="plan tensor path")
    sp.add_argument("--meta", help="metadata JSON path (default: plan path with .json)")
    sp.add_argument("--config")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--max-iters", type=int)
    sp.add_argument("--tol", type=float)
    sp.add_argument("--log-domain", action="store_true")
    sp.set_defaults(func=cmd_sinkhorn)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check on the tiny config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--h", type=float, default=DEFAULT_H)
    sp.add_argument("--tol", type=float, default=DEFAULT_TOL)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train all five variants and compare")
    common(sp)
    sp.add_argument("--out", required=True, help="comparison CSV path")
    sp.add_argument("--metrics", help="optional per-step CSV for every variant")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            raise UsageError("missing subcommand; see 'tranx --help'")
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except TranxError as exc:
        print(f"tranx: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        where = exc.filename or "output"
        print(f"tranx: error: {where}: {exc.strerror or exc}", file=sys.stderr)
        return ContractError.exit_code


if __name__ == "__main__":
    sys.exit(main())
