"""Experiment execution: single runs, sweeps, artifact files and manifests.

Every artifact file name starts with the first 12 hex digits of the config
hash that produced it. The manifest echoes the config, lists each file with
its sha256 and is the only file that carries a timestamp.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, bounds
from .config import ConfigError, ExperimentConfig
from .coupled import ScheduleSpec, run_coupled
from .datagen import DOMAIN_CHILD, AugmentationKernel, make_dataset, split_holdout, sub_seed
from .metrics import (
    CkaUndefined,
    ProbeDiverged,
    RsaUndefined,
    cka_from_grams,
    linear_probe_accuracy,
    nccc_accuracy,
    rsa_from_grams,
)

MANIFEST = "manifest.json"
SIM_SUMMARY_COLUMNS = ("seed", "child_seed", "D_T", "CKA_T", "RSA_T", "bound", "clip_events", "empty_neg_events")
ENCODER_SUMMARY_COLUMNS = (
    "seed", "child_seed", "objective", "e_T", "relative_weight_gap", "CKA_T", "RSA_T", "nccc", "linear_probe", "loss",
)


def short_hash(cfg: ExperimentConfig) -> str:
    return cfg.config_hash()[:12]


def child_seed(master_seed: int, k: int) -> int:
    """Seed of the ``k``-th run under ``master_seed``; drives data, augmentation, batches and init."""
    return sub_seed(master_seed, DOMAIN_CHILD, k)


def schedule_for(cfg: ExperimentConfig) -> ScheduleSpec:
    return ScheduleSpec(cfg.schedule, cfg.effective_eta, cfg.T, warmup=cfg.warmup)


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    return buf.getvalue()


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except (CkaUndefined, RsaUndefined):
        return math.nan


def drift_bound(cfg: ExperimentConfig) -> float:
    """Coupling bound on the terminal drift, ``inf`` when its denominator is nonpositive."""
    if cfg.T == 0:
        return 0.0
    try:
        Delta = bounds.delta_C(cfg.C, cfg.B, cfg.T, cfg.delta, cfg.tau)
    except bounds.DenominatorNonpositive:
        return math.inf
    return bounds.sim_coupling_bound(schedule_for(cfg).sum_eta, cfg.B, cfg.tau, Delta)


# ---------------------------------------------------------------------------
# Single seeds
# ---------------------------------------------------------------------------


def sim_seed_run(cfg: ExperimentConfig, k: int) -> tuple[str, dict]:
    """One coupled similarity-descent run; returns (trace CSV, summary row)."""
    s = child_seed(cfg.master_seed, k)
    ds = make_dataset(cfg.C, cfg.per_class, cfg.m, cfg.separation, s)
    tr = run_coupled(ds, AugmentationKernel(cfg.noise, s), cfg.B, schedule_for(cfg), cfg.tau, s)
    row = {
        "seed": k,
        "child_seed": s,
        "D_T": tr.D_T,
        "CKA_T": _safe(cka_from_grams, tr.sigma_cl, tr.sigma_nscl),
        "RSA_T": _safe(rsa_from_grams, tr.sigma_cl, tr.sigma_nscl),
        "bound": drift_bound(cfg),
        "clip_events": tr.total_clip_events,
        "empty_neg_events": sum(r.empty_neg_events for r in tr.records),
    }
    return tr.to_csv(), row


def encoder_seed_run(cfg: ExperimentConfig, k: int) -> tuple[str, list[dict]]:
    """One coupled encoder run over ``cfg.objectives``; returns (trace CSV, one summary row per objective).

    Each class holds ``ceil(probe_size / C)`` extra points that are never
    trained on; alignment and downstream metrics are measured on them.
    """
    from .encoder import embed, run_coupled_encoders

    s = child_seed(cfg.master_seed, k)
    n_probe = -(-cfg.probe_size // cfg.C)
    full = make_dataset(cfg.C, cfg.per_class + n_probe, cfg.m, cfg.separation, s)
    train, probe = split_holdout(full, n_probe)
    objectives = list(cfg.objectives) if "CL" in cfg.objectives else ["CL", *cfg.objectives]
    tr = run_coupled_encoders(
        objectives, train, AugmentationKernel(cfg.noise, s), cfg.B, schedule_for(cfg), cfg.tau, s,
        (probe.points, probe.labels), hidden=cfg.hidden, out_dim=cfg.out_dim,
        steps_per_epoch=cfg.steps_per_epoch, embedding=cfg.embedding,
    )
    rows = []
    for name, params in tr.params.items():
        rec = tr.final(name)
        Z_train, Z_probe = embed(params, train.points, cfg.embedding), embed(params, probe.points, cfg.embedding)
        try:
            lp = linear_probe_accuracy(Z_train, train.labels, Z_probe, probe.labels)
        except ProbeDiverged:
            lp = math.nan
        rows.append({
            "seed": k,
            "child_seed": s,
            "objective": name,
            "e_T": rec.e_t,
            "relative_weight_gap": rec.relative_weight_gap,
            "CKA_T": rec.cka_vs_cl,
            "RSA_T": rec.rsa_vs_cl,
            "nccc": nccc_accuracy(Z_train, train.labels, Z_probe, probe.labels),
            "linear_probe": lp,
            "loss": rec.loss,
        })
    return tr.to_csv(), rows


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_artifacts(cfg: ExperimentConfig, out: Path, files: dict[str, str]) -> dict:
    """Write ``files`` (name -> text) plus a manifest; returns the manifest."""
    out.mkdir(parents=True, exist_ok=True)
    listing = {}
    for name, text in files.items():
        data = text.encode()
        (out / name).write_bytes(data)
        listing[name] = _sha256(data)
    manifest = {
        "config_hash": cfg.config_hash(),
        "config": cfg.canonical(),
        "version": __version__,
        "mode": cfg.mode,
        "files": listing,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def is_complete(cfg: ExperimentConfig, out: Path) -> bool:
    """True when ``out`` holds a manifest for ``cfg`` whose listed files are intact."""
    path = out / MANIFEST
    if not path.exists():
        return False
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError:
        return False
    if manifest.get("config_hash") != cfg.config_hash():
        return False
    for name, digest in manifest.get("files", {}).items():
        f = out / name
        if not f.exists() or _sha256(f.read_bytes()) != digest:
            return False
    return True


def _json(obj: dict) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def run_files(cfg: ExperimentConfig) -> dict[str, str]:
    """Artifact files (name -> text) of a non-sweep run."""
    h = short_hash(cfg)
    seeds = range(cfg.first_seed, cfg.first_seed + cfg.seeds)
    files: dict[str, str] = {}
    if cfg.mode == "coupled-sim":
        rows = []
        for k in seeds:
            trace, row = sim_seed_run(cfg, k)
            files[f"{h}_trace_seed{k}.csv"] = trace
            rows.append(row)
        files[f"{h}_summary.csv"] = _csv(SIM_SUMMARY_COLUMNS, rows)
        files[f"{h}_bounds.json"] = bounds_json(cfg)
    elif cfg.mode == "coupled-encoder":
        rows = []
        for k in seeds:
            trace, r = encoder_seed_run(cfg, k)
            files[f"{h}_trace_seed{k}.csv"] = trace
            rows.extend(r)
        files[f"{h}_summary.csv"] = _csv(ENCODER_SUMMARY_COLUMNS, rows)
    elif cfg.mode == "bounds":
        files[f"{h}_bounds.json"] = bounds_json(cfg)
    else:
        raise ConfigError(f"mode: {cfg.mode!r} is not a single-run mode")
    return files


def bounds_json(cfg: ExperimentConfig) -> str:
    inputs = bounds.BoundInputs(cfg.C, cfg.B, cfg.T, cfg.delta, cfg.tau, schedule_for(cfg).etas().tolist())
    report = json.loads(bounds.evaluate(inputs).to_json())
    report["config_hash"] = cfg.config_hash()
    return _json(report)


def run(cfg: ExperimentConfig, out: str | Path) -> dict:
    """Execute a coupled-sim, coupled-encoder or bounds config into ``out``."""
    return write_artifacts(cfg, Path(out), run_files(cfg))


def run_verify(cfg: ExperimentConfig, out: str | Path, workers: int = 1) -> tuple[bool, dict]:
    """Run the verification suite; returns (all passed, manifest)."""
    from .verify import run_suite

    reports = run_suite(cfg.trials, cfg.seeds, workers, cfg.master_seed)
    payload = {
        "config_hash": cfg.config_hash(),
        "passed": all(r.passed for r in reports),
        "checks": [json.loads(r.to_json()) for r in reports],
    }
    manifest = write_artifacts(cfg, Path(out), {f"{short_hash(cfg)}_verify.json": _json(payload)})
    return payload["passed"], manifest


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def sweep_children(cfg: ExperimentConfig) -> list[tuple[dict, int, ExperimentConfig]]:
    """Cartesian product of the axis values times the seeds, as (axis values, seed, child config)."""
    if not cfg.axes:
        raise ConfigError("axis: a sweep needs at least one axis")
    names = sorted(cfg.axes)
    for name in names:
        if not cfg.axes[name]:
            raise ConfigError(f"axis.{name}: empty axis")
    children = []
    for combo in itertools.product(*(cfg.axes[n] for n in names)):
        point = dict(zip(names, combo))
        for k in range(cfg.first_seed, cfg.first_seed + cfg.seeds):
            child = cfg.with_values(mode=cfg.target, axes={}, seeds=1, first_seed=k, **point)
            children.append((point, k, child))
    return children


def _run_child(args) -> str:
    child, out = args
    run(child, out)
    return short_hash(child)


def _summary_rows(child: ExperimentConfig, out: Path) -> list[dict]:
    with open(out / f"{short_hash(child)}_summary.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def sweep(cfg: ExperimentConfig, out: str | Path, workers: int = 1) -> tuple[dict, list[str]]:
    """Run every incomplete child into ``out/children/<hash>`` and aggregate their summaries.

    Returns (manifest, hashes of children computed in this call).
    """
    out = Path(out)
    children = sweep_children(cfg)
    todo = []
    for _, _, child in children:
        cdir = out / "children" / short_hash(child)
        if not is_complete(child, cdir):
            todo.append((child, cdir))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            computed = list(pool.map(_run_child, todo))
    else:
        computed = [_run_child(t) for t in todo]
    names = sorted(cfg.axes)
    columns = SIM_SUMMARY_COLUMNS if cfg.target == "coupled-sim" else ENCODER_SUMMARY_COLUMNS
    rows = []
    for point, k, child in children:
        for r in _summary_rows(child, out / "children" / short_hash(child)):
            rows.append({**{n: point[n] for n in names}, "child_hash": short_hash(child), **r})
    rows.sort(key=lambda r: (*(r[n] for n in names), int(r["seed"]), r.get("objective", "")))
    h = short_hash(cfg)
    files = {f"{h}_aggregate.csv": _csv((*names, "child_hash", *columns), rows)}
    manifest = write_artifacts(cfg, out, files)
    manifest_children = {short_hash(c): c.config_hash() for _, _, c in children}
    manifest["children"] = manifest_children
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest, computed


def read_aggregate(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
