"""Closed-form high-probability factors and drift / alignment bounds."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

ESTIMATE_CAVEAT = "estimated lower bound of a supremum"


class DenominatorNonpositive(ValueError):
    """``1 - 1/C - epsilon <= 0``: the composition event cannot be guaranteed."""


@dataclass(frozen=True)
class Epsilon:
    value: float
    degenerate: bool


def epsilon_B_delta(B: int, T: int, delta: float) -> Epsilon:
    """``sqrt(log(T*B/delta) / (2B))``; clamps to 0 (flagged) when ``T*B/delta <= 1``."""
    if B < 1 or T < 1:
        raise ValueError(f"need B, T >= 1, got B={B}, T={T}")
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    ratio = T * B / delta
    if ratio <= 1.0:
        return Epsilon(0.0, True)
    return Epsilon(math.sqrt(math.log(ratio) / (2 * B)), False)


def delta_from_epsilon(C: int, eps: float, tau: float) -> float:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    denom = 1.0 - 1.0 / C - eps
    if denom <= 0:
        raise DenominatorNonpositive(
            f"1 - 1/C - eps = {denom:.6g} <= 0 at C={C}, eps={eps:.6g}"
        )
    return 2.0 * math.exp(2.0 / tau) * (1.0 / C + eps) / denom


def delta_C(C: int, B: int, T: int, delta: float, tau: float) -> float:
    """Uniform bound on the CL/NSCL softmax total-variation gap."""
    return delta_from_epsilon(C, epsilon_B_delta(B, T, delta).value, tau)


def _sum_eta(etas: Sequence[float] | np.ndarray | float) -> float:
    if np.isscalar(etas):
        return float(etas)
    return float(np.sum(np.asarray(etas, dtype=np.float64)))


def sim_coupling_bound(sum_eta: float, B: int, tau: float, Delta: float) -> float:
    """``exp(S/(2 tau^2 B)) * S/(tau sqrt(B)) * Delta`` with ``S`` the step-size sum."""
    return math.exp(sum_eta / (2 * tau**2 * B)) * sum_eta / (tau * math.sqrt(B)) * Delta


def drift_recurrence_rhs(D_t: float, eta: float, B: int, tau: float, Delta: float) -> float:
    """One step of the similarity drift recurrence."""
    return (1 + eta / (2 * tau**2 * B)) * D_t + eta * Delta / (tau * math.sqrt(B))


def per_step_gap_bound(D_t: float, B: int, tau: float, Delta: float) -> float:
    return Delta / (tau * math.sqrt(B)) + D_t / (2 * tau**2 * B)


def rho_from_drift(drift_bound: float, gram_norm: float) -> float:
    if gram_norm <= 0:
        raise ValueError("centered Gram norm must be positive")
    return drift_bound / gram_norm


def cka_lower(rho: float) -> float:
    return (1 - rho) / (1 + rho)


def r_from_drift(drift_bound: float, M: int, sigma_D: float) -> float:
    if sigma_D <= 0:
        raise ValueError("RDM standard deviation must be positive (RSA undefined for a constant RDM)")
    return drift_bound / (math.sqrt(M) * sigma_D)


def rsa_lower(r: float) -> float:
    return (1 - r) / (1 + r)


def param_drift_bound(G: float, beta: float, tau: float, Delta: float, sum_eta: float) -> float:
    """``G/(beta tau) * Delta * (exp(beta S) - 1)``, evaluated with ``expm1``."""
    if beta <= 0:
        raise ValueError("smoothness constant beta must be positive")
    return G / (beta * tau) * Delta * math.expm1(beta * sum_eta)


def surrogate_fidelity_bound(
    L_sigma: float,
    M_sigma: float,
    tau: float,
    B: int,
    etas: Sequence[float],
    xi: Sequence[float],
) -> float:
    """Bound on ``||Sigma(w_T) - Sigma_surrogate_T||_F`` with ``C_Sigma = L^2 + 1``."""
    etas = np.asarray(etas, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if etas.shape != xi.shape:
        raise ValueError("need one gradient-norm value per step")
    if L_sigma < 0 or M_sigma < 0 or np.any(xi < 0):
        raise ValueError("constants must be nonnegative")
    C_sigma = L_sigma**2 + 1
    S = float(etas.sum())
    first = math.sqrt(2) * C_sigma / (tau * math.sqrt(B)) * S
    second = M_sigma / 2 * float(np.sum(etas**2 * xi))
    return math.exp(S / (2 * tau**2 * B)) * (first + second)


@dataclass
class BoundInputs:
    C: int
    B: int
    T: int
    delta: float
    tau: float
    etas: list[float]
    beta: float | None = None
    G: float | None = None
    gram_norm: float | None = None
    sigma_D: float | None = None
    M: int | None = None
    L_sigma: float | None = None
    M_sigma: float | None = None
    xi: list[float] | None = None

    def __post_init__(self) -> None:
        self.etas = [float(e) for e in self.etas]
        if len(self.etas) != self.T:
            raise ValueError(f"need T={self.T} step sizes, got {len(self.etas)}")


@dataclass
class BoundReport:
    inputs: dict
    epsilon: float
    delta_factor: float | None
    sim_drift_bound: float | None
    rho_T: float | None = None
    cka_lower: float | None = None
    r_T: float | None = None
    rsa_lower: float | None = None
    param_drift_bound: float | None = None
    surrogate_fidelity_bound: float | None = None
    flags: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(inputs: BoundInputs) -> BoundReport:
    """Every closed-form quantity the inputs allow, with validity flags."""
    eps = epsilon_B_delta(inputs.B, inputs.T, inputs.delta)
    flags: dict = {"degenerate_epsilon": eps.degenerate}
    S = float(sum(inputs.etas))
    try:
        Delta = delta_from_epsilon(inputs.C, eps.value, inputs.tau)
    except DenominatorNonpositive as exc:
        flags["denominator_nonpositive"] = str(exc)
        return BoundReport(asdict(inputs), eps.value, None, None, flags=flags)
    report = BoundReport(
        inputs=asdict(inputs),
        epsilon=eps.value,
        delta_factor=Delta,
        sim_drift_bound=sim_coupling_bound(S, inputs.B, inputs.tau, Delta),
        flags=flags,
    )
    drift = report.sim_drift_bound
    if inputs.gram_norm is not None:
        report.rho_T = rho_from_drift(drift, inputs.gram_norm)
        report.cka_lower = cka_lower(report.rho_T)
    if inputs.sigma_D is not None and inputs.M is not None:
        report.r_T = r_from_drift(drift, inputs.M, inputs.sigma_D)
        report.rsa_lower = rsa_lower(report.r_T)
    if inputs.beta is not None and inputs.G is not None:
        report.param_drift_bound = param_drift_bound(inputs.G, inputs.beta, inputs.tau, Delta, S)
        flags["param_constants"] = ESTIMATE_CAVEAT
    if inputs.L_sigma is not None and inputs.M_sigma is not None and inputs.xi is not None:
        report.surrogate_fidelity_bound = surrogate_fidelity_bound(
            inputs.L_sigma, inputs.M_sigma, inputs.tau, inputs.B, inputs.etas, inputs.xi
        )
        flags["fidelity_constants"] = ESTIMATE_CAVEAT
    return report
