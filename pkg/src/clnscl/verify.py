"""Oracle harness: each lemma and theorem checked by brute force or Monte Carlo.

Tolerance policy: exact identities at ``1e-9`` absolute, analytic
inequalities at ``1e-7`` slack, Monte Carlo frequency claims against a
3-sigma binomial band around the target probability.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bounds
from .coupled import ScheduleSpec, run_coupled
from .datagen import DOMAIN_TRIAL, AugmentationKernel, make_dataset, negative_fractions, rng_for, sub_seed
from .metrics import RsaUndefined, center, cka_chain, cka_from_grams, rsa_chain, rsa_from_grams
from .simcore import (
    BatchLayout,
    Objective,
    layout_loss_grad,
    masked_softmax,
    softmax_jacobian,
)

IDENTITY_TOL = 1e-9
INEQUALITY_TOL = 1e-7


@dataclass
class CheckReport:
    """Outcome of one check; ``worst_margin`` is ``min(bound - observed)`` (negative means violated)."""

    name: str
    trials: int
    violations: int
    worst_margin: float
    passed: bool
    violating_seeds: list[int] = field(default_factory=list)
    tolerance: float = INEQUALITY_TOL
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=float)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.violations}/{self.trials} violations, worst margin {self.worst_margin:.3g}"


def binomial_band(p: float, trials: int, k: float = 3.0) -> float:
    """``p + k * sqrt(p (1 - p) / trials)``."""
    return p + k * math.sqrt(p * (1 - p) / trials)


def trial_seed(master_seed: int, name_id: int, trial: int) -> int:
    return sub_seed(master_seed, DOMAIN_TRIAL, name_id, trial)


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# Random batch instances over B x 2B logit arrays
# ---------------------------------------------------------------------------


def random_layout(rng: np.random.Generator, B: int, C: int) -> BatchLayout:
    labels = rng.integers(0, C, size=B)
    return BatchLayout(slots=np.arange(2 * B), labels=np.repeat(labels, 2))


def random_logits(rng: np.random.Generator, layout: BatchLayout, style: str | None = None) -> np.ndarray:
    """Logits in ``[-1, 1]``; ``adversarial`` puts positives at +1 and negatives at -1."""
    B = layout.B
    style = style or rng.choice(["uniform", "adversarial", "extreme"])
    if style == "uniform":
        return rng.uniform(-1, 1, size=(B, 2 * B))
    if style == "adversarial":
        return np.where(layout.pos_mask, 1.0, -1.0)
    return rng.choice([-1.0, 1.0], size=(B, 2 * B))


def composition_holds(labels: np.ndarray, C: int, eps: float) -> bool:
    return bool(negative_fractions(labels).min() >= 1 - 1 / C - eps)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------


def check_batch_composition(C: int, B: int, T: int, delta: float, trials: int, master_seed: int = 0) -> CheckReport:
    """Frequency of ``{some anchor in some of the T batches has negative fraction < 1 - 1/C - eps}``."""
    eps = bounds.epsilon_B_delta(B, T, delta)
    threshold = 1 - 1 / C - eps.value
    failures, seeds = 0, []
    for k in range(trials):
        labels = rng_for(master_seed, DOMAIN_TRIAL, 1, k).integers(0, C, size=(T, B))
        counts = np.stack([np.bincount(row, minlength=C) for row in labels])
        worst = 1 - counts.max(axis=1) / B
        if np.any(worst < threshold):
            failures += 1
            seeds.append(k)
    freq = failures / trials
    limit = binomial_band(min(delta, 1.0), trials)
    return CheckReport(
        name="batch_composition",
        trials=trials,
        violations=failures,
        worst_margin=limit - freq,
        passed=freq <= limit,
        violating_seeds=seeds[:50],
        details={
            "C": C, "B": B, "T": T, "delta": delta, "epsilon": eps.value,
            "degenerate_epsilon": eps.degenerate, "failure_frequency": freq, "limit": limit,
            "hoeffding_per_anchor": math.exp(-2 * B * eps.value**2),
        },
    )


def check_lipschitz(tau: float, B: int, trials: int, C: int = 4, master_seed: int = 0) -> CheckReport:
    """``||G(s) - G(s~)||_F <= ||s - s~||_F / (2 tau^2 B)`` for CL and NSCL, plus ``||Diag(p) - pp^T|| <= 1/2``."""
    viol, worst, seeds = 0, math.inf, []
    jac_worst = 0.0
    for k in range(trials):
        rng = rng_for(master_seed, DOMAIN_TRIAL, 2, k)
        layout = random_layout(rng, B, C)
        s = random_logits(rng, layout, "uniform")
        if k % 2:
            s2 = np.clip(s + rng.normal(scale=10 ** rng.uniform(-4, 0), size=s.shape), -1, 1)
        else:
            s2 = random_logits(rng, layout, "uniform")
        bound = float(np.linalg.norm(s - s2)) / (2 * tau**2 * B)
        for kind in (Objective.CL, Objective.NSCL):
            g1 = layout_loss_grad(kind, s, layout, tau).grad
            g2 = layout_loss_grad(kind, s2, layout, tau).grad
            margin = bound - float(np.linalg.norm(g1 - g2))
            worst = min(worst, margin)
            if margin < -INEQUALITY_TOL:
                viol += 1
                seeds.append(k)
        p = masked_softmax(s, layout.denom_mask, tau)[0]
        J = softmax_jacobian(p[layout.denom_mask[0]])
        jac = float(np.max(np.abs(np.linalg.eigvalsh(J))))
        jac_worst = max(jac_worst, jac)
        if jac > 0.5 + INEQUALITY_TOL:
            viol += 1
            seeds.append(k)
    return CheckReport(
        name="gradient_lipschitz",
        trials=trials,
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=sorted(set(seeds)),
        details={"tau": tau, "B": B, "max_softmax_jacobian_norm": jac_worst},
    )


def check_gradient_norms(tau: float, B: int, trials: int, C: int = 4, master_seed: int = 0) -> CheckReport:
    """Per-anchor gradient norm, batch Pythagorean identity and partition-sum bounds."""
    viol, worst, seeds = 0, math.inf, []
    ident_err, part_worst = 0.0, math.inf
    for k in range(trials):
        rng = rng_for(master_seed, DOMAIN_TRIAL, 3, k)
        layout = random_layout(rng, B, C)
        s = random_logits(rng, layout)
        bad = False
        for kind in (Objective.CL, Objective.NSCL):
            res = layout_loss_grad(kind, s, layout, tau)
            per_anchor = np.linalg.norm(res.grad * B, axis=1)
            worst = min(worst, float(np.min(math.sqrt(2) / tau - per_anchor)))
            bad |= bool(np.any(per_anchor > math.sqrt(2) / tau + INEQUALITY_TOL))
            total = float(np.linalg.norm(res.grad))
            ident = abs(total**2 - float(np.sum(per_anchor**2)) / B**2)
            ident_err = max(ident_err, ident)
            bad |= ident > IDENTITY_TOL
            bad |= total > math.sqrt(2 / B) / tau + INEQUALITY_TOL
        e = np.exp(s / tau)
        for mask in (layout.pos_mask, layout.neg_mask, layout.denom_mask):
            size = mask.sum(axis=1)
            Z = np.where(mask, e, 0.0).sum(axis=1)
            lo, hi = size * math.exp(-1 / tau), size * math.exp(1 / tau)
            live = size > 0
            if np.any(live):
                rel = np.minimum(Z - lo, hi - Z)[live] / hi[live]
                part_worst = min(part_worst, float(rel.min()))
            bad |= bool(np.any(Z < lo * (1 - INEQUALITY_TOL)) or np.any(Z > hi * (1 + INEQUALITY_TOL)))
        if bad:
            viol += 1
            seeds.append(k)
    return CheckReport(
        name="gradient_norms",
        trials=trials,
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=seeds,
        details={"tau": tau, "B": B, "pythagorean_max_error": ident_err, "partition_worst_rel_margin": part_worst},
    )


def check_reweighting_gap(C: int, B: int, tau: float, delta: float, trials: int, T: int = 1, master_seed: int = 0) -> CheckReport:
    """``||p - q||_1 = 2 alpha`` always, and ``<= Delta`` on composition-event batches."""
    eps = bounds.epsilon_B_delta(B, T, delta).value
    Delta = bounds.delta_from_epsilon(C, eps, tau)
    viol, worst, seeds = 0, math.inf, []
    on_event, ident_err = 0, 0.0
    for k in range(trials):
        rng = rng_for(master_seed, DOMAIN_TRIAL, 4, k)
        layout = random_layout(rng, B, C)
        s = random_logits(rng, layout)
        valid = layout.neg_mask.any(axis=1)
        p = masked_softmax(s, layout.denom_mask, tau)
        q = masked_softmax(s, layout.neg_mask, tau)
        l1 = np.abs(p - q).sum(axis=1)
        alpha = np.where(layout.pos_mask, p, 0.0).sum(axis=1)
        err = float(np.max(np.abs(l1 - 2 * alpha)[valid])) if valid.any() else 0.0
        ident_err = max(ident_err, err)
        bad = err > IDENTITY_TOL
        if composition_holds(layout.anchor_labels, C, eps):
            on_event += 1
            margin = Delta - float(l1.max())
            worst = min(worst, margin)
            bad |= margin < -INEQUALITY_TOL
        if bad:
            viol += 1
            seeds.append(k)
    return CheckReport(
        name="reweighting_gap",
        trials=trials,
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=seeds,
        details={"C": C, "B": B, "tau": tau, "Delta": Delta, "event_trials": on_event, "identity_max_error": ident_err},
    )


def check_step_gap(C: int, B: int, tau: float, delta: float, trials: int, T: int = 1, master_seed: int = 0) -> CheckReport:
    """``||G_CL(s) - G_NSCL(s~)||_F <= Delta/(tau sqrt(B)) + ||s - s~||_F/(2 tau^2 B)`` on event batches."""
    eps = bounds.epsilon_B_delta(B, T, delta).value
    Delta = bounds.delta_from_epsilon(C, eps, tau)
    viol, worst, seeds, on_event = 0, math.inf, [], 0
    for k in range(trials):
        rng = rng_for(master_seed, DOMAIN_TRIAL, 5, k)
        layout = random_layout(rng, B, C)
        if not composition_holds(layout.anchor_labels, C, eps):
            continue
        on_event += 1
        s = random_logits(rng, layout)
        s2 = s if k % 3 == 0 else np.clip(s + rng.normal(scale=10 ** rng.uniform(-3, 0), size=s.shape), -1, 1)
        gap = float(np.linalg.norm(layout_loss_grad("CL", s, layout, tau).grad - layout_loss_grad("NSCL", s2, layout, tau).grad))
        bound = bounds.per_step_gap_bound(float(np.linalg.norm(s - s2)), B, tau, Delta)
        margin = bound - gap
        worst = min(worst, margin)
        if margin < -INEQUALITY_TOL:
            viol += 1
            seeds.append(k)
    return CheckReport(
        name="per_step_gap",
        trials=on_event,
        violations=viol,
        worst_margin=worst,
        passed=viol == 0 and on_event > 0,
        violating_seeds=seeds,
        details={"C": C, "B": B, "tau": tau, "Delta": Delta, "drawn": trials},
    )


@dataclass(frozen=True)
class SimSettings:
    C: int = 10
    n: int = 20
    m: int = 16
    separation: float = 2.0
    noise: float = 0.1
    B: int = 128
    tau: float = 0.5
    T: int = 100
    eta: float = 0.1
    delta: float = 0.1
    schedule: str = "constant"

    def schedule_spec(self) -> ScheduleSpec:
        return ScheduleSpec(self.schedule, self.eta, self.T)


def simulate(settings: SimSettings, seed: int):
    ds = make_dataset(settings.C, settings.n, settings.m, settings.separation, seed)
    return run_coupled(ds, AugmentationKernel(settings.noise, seed), settings.B, settings.schedule_spec(), settings.tau, seed)


def _coupling_trial(args) -> dict:
    settings, seed = args
    tr = simulate(settings, seed)
    T = settings.T
    out = {"seed": seed, "D_T": tr.D_T, "clip_events": tr.total_clip_events, "recurrence_violations": 0}
    if T == 0:
        return out
    eps = bounds.epsilon_B_delta(settings.B, T, settings.delta).value
    Delta = bounds.delta_from_epsilon(settings.C, eps, settings.tau)
    drifts = tr.drifts
    threshold = 1 - 1 / settings.C - eps
    event = True
    for t, rec in enumerate(tr.records):
        ok = rec.min_neg_fraction >= threshold
        event &= ok
        rhs = bounds.drift_recurrence_rhs(drifts[t], rec.eta_t, settings.B, settings.tau, Delta)
        if ok and drifts[t + 1] > rhs + INEQUALITY_TOL:
            out["recurrence_violations"] += 1
    out["event"] = event
    return out


def check_sim_coupling(settings: SimSettings, seeds: list[int], workers: int = 1, clip_stress: float = 0.05) -> CheckReport:
    """Fraction of seeds whose terminal drift exceeds the coupling bound, against ``delta``."""
    if settings.T == 0:
        bound = 0.0
    else:
        Delta = bounds.delta_C(settings.C, settings.B, settings.T, settings.delta, settings.tau)
        bound = bounds.sim_coupling_bound(settings.eta * settings.T if settings.schedule == "constant"
                                          else settings.schedule_spec().sum_eta, settings.B, settings.tau, Delta)
    rows = _pool_map(_coupling_trial, [(settings, s) for s in seeds], workers)
    exceed = [r["seed"] for r in rows if r["D_T"] > bound + INEQUALITY_TOL]
    frac = len(exceed) / len(rows)
    limit = binomial_band(settings.delta, len(rows))
    touched = max(1, settings.T * settings.B * (2 * settings.B - 1) * 2)
    clip_rate = sum(r["clip_events"] for r in rows) / (len(rows) * touched)
    flags = {}
    if clip_rate > clip_stress:
        flags["premise_stress"] = f"clip events on {clip_rate:.1%} of updates; the bounded-logit premise is enforced by projection"
    return CheckReport(
        name="sim_coupling",
        trials=len(rows),
        violations=len(exceed),
        worst_margin=float(min(bound - r["D_T"] for r in rows)),
        passed=frac <= limit,
        violating_seeds=exceed,
        details={
            "settings": asdict(settings), "bound": bound, "violation_fraction": frac, "limit": limit,
            "max_D_T": max(r["D_T"] for r in rows), "median_D_T": float(np.median([r["D_T"] for r in rows])),
            "recurrence_violations": sum(r["recurrence_violations"] for r in rows),
            "clip_rate": clip_rate, **flags,
        },
    )


def check_metric_bounds(settings_list: list[tuple[SimSettings, int]], workers: int = 1) -> CheckReport:
    """Measured CKA/RSA against ``(1-x)/(1+x)`` built from measured (and, when finite, bounded) drift.

    The measured chain is a deterministic inequality whenever ``x < 1``; the
    bound-driven chain is checked only when the coupling bound is finite.
    """
    viol, worst, seeds, skipped = 0, math.inf, [], []
    for settings, seed in settings_list:
        tr = simulate(settings, seed)
        S1, S2 = tr.sigma_cl, tr.sigma_nscl
        cka = cka_from_grams(S1, S2)
        rho, lo = cka_chain(S1, S2)
        margins = []
        if rho < 1:
            margins.append(cka - lo)
        try:
            corr = rsa_from_grams(S1, S2)
            r, lo_r = rsa_chain(S1, S2)
            if r < 1:
                margins.append(corr - lo_r)
        except RsaUndefined as exc:
            skipped.append({"seed": seed, "reason": str(exc)})
            corr = None
        try:
            Delta = bounds.delta_C(settings.C, settings.B, max(settings.T, 1), settings.delta, settings.tau)
            drift_bound = bounds.sim_coupling_bound(settings.schedule_spec().sum_eta, settings.B, settings.tau, Delta)
            if tr.D_T <= drift_bound:
                rho_b = bounds.rho_from_drift(drift_bound, float(np.linalg.norm(center(S1))))
                margins.append(cka - bounds.cka_lower(rho_b))
        except bounds.DenominatorNonpositive:
            pass
        m = min(margins) if margins else math.inf
        worst = min(worst, m)
        if m < -INEQUALITY_TOL:
            viol += 1
            seeds.append(seed)
    return CheckReport(
        name="metric_bounds",
        trials=len(settings_list),
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=seeds,
        details={"rsa_skipped": skipped},
    )


@dataclass(frozen=True)
class ParamSettings:
    C: int = 10
    n: int = 20
    m: int = 8
    hidden: int | None = 8
    out_dim: int = 8
    separation: float = 2.0
    noise: float = 0.1
    B: int = 32
    tau: float = 0.5
    T: int = 10
    eta: float = 0.1
    delta: float = 0.5


# Single normalised linear layer: the T=1 gap is eta * ||(P - I) G|| and stays
# under 1e-4 at eta=1e-6 for this size; tanh MLPs land between 1e-4 and 2e-3.
FIDELITY_SMALL_STEP = ParamSettings(C=4, n=5, m=8, hidden=None, out_dim=8, B=8, T=1, eta=1e-6)


def check_param_coupling(settings: ParamSettings, seeds: list[int], n_pairs: int = 100) -> CheckReport:
    """Per-step gradient gap at a shared iterate, and the terminal parameter drift with estimated constants."""
    from .encoder import estimate_smoothness_constants, max_pair_grad_norm, run_coupled_encoders
    from .datagen import batch_views, draw_batch, split_holdout

    eps = bounds.epsilon_B_delta(settings.B, max(settings.T, 1), settings.delta).value
    Delta = bounds.delta_from_epsilon(settings.C, eps, settings.tau)
    threshold = 1 - 1 / settings.C - eps
    viol, worst, bad_seeds = 0, math.inf, []
    terminal = []
    steps_checked = 0
    for seed in seeds:
        full = make_dataset(settings.C, settings.n + 2, settings.m, settings.separation, seed)
        train, probe = split_holdout(full, 2)
        kernel = AugmentationKernel(settings.noise, seed)
        schedule = ScheduleSpec("constant", settings.eta, settings.T)
        tr = run_coupled_encoders(
            ["CL", "NSCL"], train, kernel, settings.B, schedule, settings.tau, seed,
            (probe.points, probe.labels), hidden=settings.hidden, out_dim=settings.out_dim,
            track_pair_grads=True,
        )
        for t, (gap, G_t, frac) in enumerate(zip(tr.grad_gaps, tr.pair_grad_norms, tr.min_neg_fractions)):
            if frac < threshold:
                continue
            steps_checked += 1
            margin = G_t / settings.tau * Delta - gap
            worst = min(worst, margin)
            if margin < -INEQUALITY_TOL:
                viol += 1
                bad_seeds.append(seed)
        e_T = tr.final("NSCL").e_t
        if settings.T == 0:
            terminal.append({"seed": seed, "e_T": e_T, "bound": 0.0})
            continue
        batches = []
        for t in range(min(settings.T, 5)):
            b = draw_batch(train, settings.B, t, seed)
            batches.append((batch_views(train, b, settings.noise), b.labels))
        est = estimate_smoothness_constants(tr.params["CL"], batches, settings.tau, n_pairs=n_pairs, seed=seed)
        G = max(est.G, max(tr.pair_grad_norms))
        bound = bounds.param_drift_bound(G, est.beta, settings.tau, Delta, schedule.sum_eta)
        terminal.append({"seed": seed, "e_T": e_T, "bound": bound, "beta_hat": est.beta, "G_hat": G})
    terminal_viol = [r["seed"] for r in terminal if r["e_T"] > r["bound"] + INEQUALITY_TOL]
    return CheckReport(
        name="param_coupling",
        trials=steps_checked,
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=sorted(set(bad_seeds)),
        details={
            "Delta": Delta, "terminal": terminal, "terminal_violations": terminal_viol,
            "caveat": bounds.ESTIMATE_CAVEAT,
        },
    )


def check_surrogate_fidelity(
    settings: ParamSettings, seeds: list[int], schedule: ScheduleSpec | None = None, safety: float = 2.0
) -> CheckReport:
    """``||Sigma(w_T) - Sigma_surrogate_T||_F`` against the fidelity bound with inflated constants."""
    from .encoder import run_fidelity

    schedule = schedule or ScheduleSpec("constant", settings.eta, settings.T)
    viol, worst, bad, rows = 0, math.inf, [], []
    for seed in seeds:
        ds = make_dataset(settings.C, settings.n, settings.m, settings.separation, seed)
        ft = run_fidelity(
            ds, AugmentationKernel(settings.noise, seed), settings.B, schedule, settings.tau, seed,
            hidden=settings.hidden, out_dim=settings.out_dim,
        )
        bound = bounds.surrogate_fidelity_bound(
            safety * ft.L_sigma, safety * ft.M_sigma, settings.tau, settings.B, ft.etas, ft.xi
        )
        E_T = float(ft.E[-1])
        margin = bound - E_T
        worst = min(worst, margin)
        rows.append({"seed": seed, "E_T": E_T, "bound": bound, "L_sigma": ft.L_sigma, "M_sigma": ft.M_sigma})
        if margin < -INEQUALITY_TOL:
            viol += 1
            bad.append(seed)
    return CheckReport(
        name="surrogate_fidelity",
        trials=len(seeds),
        violations=viol,
        worst_margin=worst,
        passed=viol == 0,
        violating_seeds=bad,
        details={"runs": rows, "safety_factor": safety, "caveat": bounds.ESTIMATE_CAVEAT},
    )


def run_suite(trials: int = 1000, seeds: int = 200, workers: int = 1, master_seed: int = 0) -> list[CheckReport]:
    """The full verification suite at the default settings."""
    reports = [check_batch_composition(10, 512, 100, 0.01, trials, master_seed)]
    for tau in (0.1, 0.5, 1.0):
        reports.append(check_lipschitz(tau, 16, trials // 3 + 1, master_seed=master_seed))
        reports.append(check_gradient_norms(tau, 16, trials // 3 + 1, master_seed=master_seed))
    reports.append(check_reweighting_gap(10, 128, 0.5, 0.1, trials, master_seed=master_seed))
    reports.append(check_step_gap(10, 128, 0.5, 0.1, trials, master_seed=master_seed))
    reports.append(check_sim_coupling(SimSettings(), list(range(seeds)), workers))
    metric_settings = [(SimSettings(C=4, n=10, B=16, T=50, eta=1.0, tau=0.5), s) for s in range(seeds)]
    reports.append(check_metric_bounds(metric_settings, workers))
    reports.append(check_param_coupling(ParamSettings(), list(range(3))))
    reports.append(check_surrogate_fidelity(FIDELITY_SMALL_STEP, list(range(3))))
    return reports
