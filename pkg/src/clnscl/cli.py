"""Command-line entry point: ``clnscl {run,sweep,bounds,verify,metrics}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config


def _load(args, **defaults) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig(**defaults)
    if args.seed is not None:
        cfg = cfg.with_values(master_seed=args.seed)
    if getattr(args, "trials", None) is not None:
        cfg = cfg.with_values(trials=args.trials)
    return cfg


def load_embeddings(path: str | Path) -> np.ndarray:
    """Rows of an ``.npy`` array or a comma-separated file (an optional header row is skipped)."""
    path = Path(path)
    if path.suffix == ".npy":
        Z = np.load(path)
    else:
        try:
            Z = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError:
            Z = np.loadtxt(path, delimiter=",", ndmin=2, skiprows=1)
    if Z.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D array of embeddings")
    return Z.astype(np.float64)


def metrics_report(Z1: np.ndarray, Z2: np.ndarray) -> dict:
    from .metrics import (
        CkaUndefined, RsaUndefined, cka_chain, cka_from_grams, cosine_gram, frob_drift, rsa_chain, rsa_from_grams,
    )

    if Z1.shape[0] != Z2.shape[0]:
        raise ValueError(f"row count mismatch: {Z1.shape[0]} vs {Z2.shape[0]}")
    S1, S2 = cosine_gram(Z1), cosine_gram(Z2)
    out: dict = {"n": int(Z1.shape[0]), "drift": frob_drift(S1, S2)}
    try:
        out["cka"] = cka_from_grams(S1, S2)
        out["rho"], out["cka_lower"] = cka_chain(S1, S2)
    except CkaUndefined as exc:
        out["cka"] = None
        out["cka_error"] = str(exc)
    try:
        out["rsa"] = rsa_from_grams(S1, S2)
        out["r"], out["rsa_lower"] = rsa_chain(S1, S2)
    except RsaUndefined as exc:
        out["rsa"] = None
        out["rsa_error"] = str(exc)
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clnscl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required: bool) -> None:
        p.add_argument("--config", required=config_required, help="key = value config file")
        p.add_argument("--seed", type=int, help="override master_seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (default: 1)")

    common(sub.add_parser("run", help="run the config's mode"), True)
    common(sub.add_parser("sweep", help="run a config with axis.* lists"), True)
    common(sub.add_parser("bounds", help="evaluate the closed-form bounds"), False)
    p = sub.add_parser("verify", help="run the lemma and theorem checks")
    common(p, False)
    p.add_argument("--trials", type=int, help="Monte Carlo trials per check")
    p = sub.add_parser("metrics", help="CKA and RSA between two embedding files")
    p.add_argument("a")
    p.add_argument("b")
    return parser


def main(argv: list[str] | None = None) -> int:
    from . import runner

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "metrics":
            print(json.dumps(metrics_report(load_embeddings(args.a), load_embeddings(args.b)), indent=2, sort_keys=True))
            return 0
        if args.command == "verify":
            cfg = _load(args, mode="verify", seeds=200).with_values(mode="verify")
            passed, manifest = runner.run_verify(cfg, args.out, args.workers)
            report = json.loads((Path(args.out) / next(iter(manifest["files"]))).read_text())
            for check in report["checks"]:
                status = "PASS" if check["passed"] else "FAIL"
                print(f"{status} {check['name']}: {check['violations']}/{check['trials']} violations")
            return 0 if passed else 1
        if args.command == "bounds":
            cfg = _load(args, mode="bounds").with_values(mode="bounds")
            manifest = runner.run(cfg, args.out)
        elif args.command == "sweep" or (args.command == "run" and _load(args).mode == "sweep"):
            cfg = _load(args)
            if cfg.mode != "sweep":
                raise ConfigError(f"mode: sweep expects mode = sweep, got {cfg.mode!r}")
            manifest, computed = runner.sweep(cfg, args.out, args.workers)
            print(f"computed {len(computed)} of {len(manifest['children'])} children")
        else:
            cfg = _load(args)
            if cfg.mode == "verify":
                passed, manifest = runner.run_verify(cfg, args.out, args.workers)
                print(f"config {manifest['config_hash'][:12]}: verify {'passed' if passed else 'failed'}")
                return 0 if passed else 1
            manifest = runner.run(cfg, args.out)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"clnscl: error: {exc}", file=sys.stderr)
        return 2
    print(f"config {manifest['config_hash'][:12]} -> {args.out}")
    for name in sorted(manifest["files"]):
        print(f"  {name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
