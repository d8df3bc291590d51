"""Coupled CL / NSCL similarity-descent runs under shared randomness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .datagen import AugmentationKernel, Dataset, draw_batch, negative_fractions, reference_views
from .simcore import BatchLayout, Objective, SparseGrad, layout_from_indices, layout_loss_grad

TRACE_COLUMNS = ("t", "eta_t", "D_t", "loss_cl", "loss_nscl", "grad_gap", "clip_events", "empty_neg_events")


@dataclass(frozen=True)
class ScheduleSpec:
    """Step-size schedule.

    ``kind`` is one of ``constant``, ``cosine`` (linear warm-up then cosine
    decay), ``inverse-t`` (``eta / (t + 1)``) or ``custom`` (explicit values).
    """

    kind: str
    eta: float
    T: int
    warmup: int = 0
    values: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.kind not in ("constant", "cosine", "inverse-t", "custom"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "custom" and len(self.values) != self.T:
            raise ValueError("custom schedule needs exactly T values")
        if self.kind != "custom" and self.eta <= 0:
            raise ValueError("base step size must be positive")
        if self.warmup < 0 or (self.kind == "cosine" and self.warmup > self.T):
            raise ValueError("warmup must lie in [0, T]")
        if np.any(self.etas() <= 0):
            raise ValueError("every step size must be positive")

    def eta_at(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "inverse-t":
            return self.eta / (t + 1)
        if self.kind == "custom":
            return float(self.values[t])
        if t < self.warmup:
            return self.eta * (t + 1) / self.warmup
        span = self.T - self.warmup
        return 0.5 * self.eta * (1 + math.cos(math.pi * (t - self.warmup) / span))

    def etas(self) -> np.ndarray:
        return np.array([self.eta_at(t) for t in range(self.T)], dtype=np.float64)

    @property
    def sum_eta(self) -> float:
        return float(self.etas().sum())

    @property
    def sum_eta_sq(self) -> float:
        return float(np.sum(self.etas() ** 2))


@dataclass
class SimState:
    """Symmetric similarity matrix over ``2N`` view slots with unit diagonal."""

    entries: np.ndarray

    def __post_init__(self) -> None:
        self.entries = np.asarray(self.entries, dtype=np.float64)

    def validate(self, atol: float = 1e-12) -> None:
        S = self.entries
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("state must be square")
        if np.any(np.abs(S) > 1 + atol):
            raise ValueError("entries must lie in [-1, 1]")
        if not np.array_equal(S, S.T):
            raise ValueError("state must be symmetric")
        if not np.all(np.diag(S) == 1.0):
            raise ValueError("diagonal must be exactly 1")

    def copy(self) -> "SimState":
        return SimState(self.entries.copy())


def init_sim_state(dataset: Dataset, kernel: AugmentationKernel) -> SimState:
    """Cosine similarities of the 2N view slots drawn at step key ``t = -1``."""
    V = reference_views(dataset, kernel)
    S = V @ V.T
    S = np.clip(0.5 * (S + S.T), -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return SimState(S)


def surrogate_step(
    state: SimState, grad: SparseGrad, eta: float, inplace: bool = False
) -> tuple[SimState, int]:
    """Descend on the touched directed entries, symmetrise, then clip to ``[-1, 1]``.

    Each unordered pair ``{a, b}`` moves by ``eta`` times the mean gradient over
    its touched directed coordinates (one or both of ``(a, b)``, ``(b, a)``), so
    a single touched coordinate moves the entry and its mirror by the same amount.
    Returns the new state and the number of unordered pairs that were clipped.
    With ``inplace`` the input state is updated and returned.
    """
    S = state.entries if inplace else state.entries.copy()
    if grad.rows.size == 0:
        return (state if inplace else SimState(S)), 0
    keep = grad.rows != grad.cols
    rows, cols, vals = grad.rows[keep], grad.cols[keep], grad.values[keep]
    mark = np.zeros(S.shape[0], dtype=bool)
    mark[rows] = True
    mark[cols] = True
    touched = np.flatnonzero(mark)
    k = touched.size
    lookup = np.full(S.shape[0], -1, dtype=np.int64)
    lookup[touched] = np.arange(k)
    r, c = lookup[rows], lookup[cols]
    flat = r * k + c
    U = np.bincount(flat, weights=vals, minlength=k * k).reshape(k, k)
    hit = (np.bincount(flat, minlength=k * k) > 0).reshape(k, k).astype(np.int64)
    num = U + U.T
    cnt = hit + hit.T
    step = np.divide(num, cnt, out=np.zeros_like(num), where=cnt > 0)
    block = S[np.ix_(touched, touched)] - eta * step
    over = np.abs(block) > 1.0
    clipped = int(np.count_nonzero(np.triu(over, k=1)))
    block = np.clip(block, -1.0, 1.0)
    np.fill_diagonal(block, 1.0)
    S[np.ix_(touched, touched)] = block
    return (state if inplace else SimState(S)), clipped


@dataclass
class StepRecord:
    t: int
    eta_t: float
    D_t: float
    loss_cl: float
    loss_nscl: float
    grad_gap: float
    clip_events: int
    empty_neg_events: int
    min_neg_fraction: float
    lipschitz_arg: float


@dataclass
class CoupledTrace:
    """Per-step records of a coupled run; ``D_T`` is the post-run drift."""

    records: list[StepRecord]
    D_T: float
    sigma_cl: np.ndarray = field(repr=False)
    sigma_nscl: np.ndarray = field(repr=False)
    params: dict = field(default_factory=dict)

    @property
    def drifts(self) -> np.ndarray:
        return np.array([r.D_t for r in self.records] + [self.D_T])

    @property
    def total_clip_events(self) -> int:
        return sum(r.clip_events for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in self.records:
            writer.writerow(
                [r.t, repr(r.eta_t), repr(r.D_t), repr(r.loss_cl), repr(r.loss_nscl),
                 repr(r.grad_gap), r.clip_events, r.empty_neg_events]
            )
        T = len(self.records)
        writer.writerow([T, repr(0.0), repr(self.D_T), "nan", "nan", "nan", 0, 0])
        return buf.getvalue()


def batch_gradients(
    sigma_cl: np.ndarray, sigma_nscl: np.ndarray, layout: BatchLayout, tau: float
):
    """CL gradient at ``sigma_cl`` and NSCL gradient at ``sigma_nscl`` on the same batch."""
    s_cl = layout.gather(sigma_cl)
    s_ns = layout.gather(sigma_nscl)
    return (
        layout_loss_grad(Objective.CL, s_cl, layout, tau),
        layout_loss_grad(Objective.NSCL, s_ns, layout, tau),
        s_cl,
        s_ns,
    )


def per_step_gap(sigma_cl: np.ndarray, sigma_nscl: np.ndarray, layout: BatchLayout, tau: float) -> float:
    """``||G_CL(sigma_cl) - G_NSCL(sigma_nscl)||_F`` over the batch's (anchor, key) coordinates."""
    g_cl, g_ns, _, _ = batch_gradients(sigma_cl, sigma_nscl, layout, tau)
    return float(np.linalg.norm(g_cl.grad - g_ns.grad))


def run_coupled(
    dataset: Dataset,
    kernel: AugmentationKernel,
    B: int,
    schedule: ScheduleSpec,
    tau: float,
    master_seed: int,
    init: SimState | None = None,
) -> CoupledTrace:
    """Advance CL and NSCL similarity descent on identical batches from a shared start.

    ``lipschitz_arg`` in each record is the norm of the gathered logit
    difference between the two states, the argument of the per-step
    Lipschitz term; it is at most ``D_t`` whenever no base sample repeats
    within the batch.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    state = init.copy() if init is not None else init_sim_state(dataset, kernel)
    cl, ns = state.copy(), state.copy()
    records = []
    for t in range(schedule.T):
        eta = schedule.eta_at(t)
        batch = draw_batch(dataset, B, t, master_seed)
        layout = layout_from_indices(batch.base_indices, batch.labels)
        g_cl, g_ns, s_cl, s_ns = batch_gradients(cl.entries, ns.entries, layout, tau)
        D_t = float(np.linalg.norm(cl.entries - ns.entries))
        cl, clip_cl = surrogate_step(cl, layout.to_slot_grad(g_cl.grad), eta, inplace=True)
        ns, clip_ns = surrogate_step(ns, layout.to_slot_grad(g_ns.grad), eta, inplace=True)
        records.append(
            StepRecord(
                t=t,
                eta_t=eta,
                D_t=D_t,
                loss_cl=g_cl.loss,
                loss_nscl=g_ns.loss,
                grad_gap=float(np.linalg.norm(g_cl.grad - g_ns.grad)),
                clip_events=clip_cl + clip_ns,
                empty_neg_events=g_ns.skipped,
                min_neg_fraction=float(negative_fractions(batch.labels).min()),
                lipschitz_arg=float(np.linalg.norm(s_cl - s_ns)),
            )
        )
    return CoupledTrace(
        records=records,
        D_T=float(np.linalg.norm(cl.entries - ns.entries)),
        sigma_cl=cl.entries,
        sigma_nscl=ns.entries,
        params={"B": B, "tau": tau, "master_seed": master_seed, "C": dataset.C, "N": dataset.N},
    )
