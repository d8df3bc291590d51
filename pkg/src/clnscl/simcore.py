"""CL / NSCL losses and their exact gradients as functions of similarity entries.

Two views of the same machinery live here:

* :class:`AnchorView` and friends treat one anchor at a time and mirror the
  per-anchor algebra directly; they are used by the oracle checks.
* :class:`BatchLayout` vectorises the same formulas over a ``B x 2B`` logit
  array (anchor position by key position) and is what the training loops use.

Batch layout convention: key position ``2s`` is view 1 of batch sample ``s``
and ``2s + 1`` its view 2. Sample ``s`` contributes one anchor (position
``2s``) whose positive is position ``2s + 1`` and whose denominator is every
other key position. Keys sharing the anchor's label are positives.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class Objective(str, Enum):
    CL = "CL"
    NSCL = "NSCL"
    SCL = "SCL"
    DCL = "DCL"
    CE = "CE"


class PositiveOnlyBatch(ValueError):
    """An anchor's NSCL denominator has no negatives."""


def softmax_tau(logits: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax with max-subtraction."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    s = np.asarray(logits, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty logit vector")
    if not np.all(np.isfinite(s)):
        raise ValueError("logits must be finite")
    z = s / tau
    e = np.exp(z - z.max())
    return e / e.sum()


def _logsumexp(z: np.ndarray) -> float:
    top = z.max()
    return float(top + np.log(np.exp(z - top).sum()))


@dataclass(frozen=True)
class AnchorView:
    """One anchor's denominator: ordered keys, their logits and positive flags."""

    anchor: int
    positive: int
    keys: tuple[int, ...]
    logits: np.ndarray
    is_pos: np.ndarray
    tau: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "logits", np.asarray(self.logits, dtype=np.float64))
        object.__setattr__(self, "is_pos", np.asarray(self.is_pos, dtype=bool))
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if len(self.keys) != self.logits.shape[0] or len(self.keys) != self.is_pos.shape[0]:
            raise ValueError("keys, logits and is_pos must align")
        if self.anchor in self.keys:
            raise ValueError("the anchor itself cannot be in its denominator")
        if self.positive not in self.keys:
            raise ValueError("the positive must be in the denominator")
        if not self.is_pos[self.pos_index]:
            raise ValueError("the positive must be flagged as a same-class key")

    @property
    def pos_index(self) -> int:
        return self.keys.index(self.positive)

    @property
    def neg_keys(self) -> tuple[int, ...]:
        return tuple(k for k, p in zip(self.keys, self.is_pos) if not p)

    @property
    def pos_keys(self) -> tuple[int, ...]:
        return tuple(k for k, p in zip(self.keys, self.is_pos) if p)


@dataclass(frozen=True)
class SoftmaxPair:
    p: np.ndarray
    q: np.ndarray
    alpha: float
    z_pos: float
    z_neg: float


def softmax_pair(av: AnchorView) -> SoftmaxPair:
    """CL softmax over the whole denominator and NSCL softmax renormalised on negatives."""
    neg = ~av.is_pos
    if not neg.any():
        raise PositiveOnlyBatch(f"anchor {av.anchor} has no negatives in its denominator")
    p = softmax_tau(av.logits, av.tau)
    q = np.zeros_like(p)
    q[neg] = softmax_tau(av.logits[neg], av.tau)
    e = np.exp(av.logits / av.tau)
    return SoftmaxPair(
        p=p,
        q=q,
        alpha=float(p[av.is_pos].sum()),
        z_pos=float(e[av.is_pos].sum()),
        z_neg=float(e[neg].sum()),
    )


def cl_anchor_loss(av: AnchorView) -> float:
    z = av.logits / av.tau
    return _logsumexp(z) - float(z[av.pos_index])


def nscl_anchor_loss(av: AnchorView) -> float:
    """Negatives-only loss; the positive sits in the numerator only, so it can be negative."""
    neg = ~av.is_pos
    if not neg.any():
        raise PositiveOnlyBatch(f"anchor {av.anchor} has no negatives in its denominator")
    z = av.logits / av.tau
    return _logsumexp(z[neg]) - float(z[av.pos_index])


def anchor_loss(kind: Objective | str, av: AnchorView) -> float:
    kind = Objective(kind)
    if kind is Objective.CL:
        return cl_anchor_loss(av)
    if kind is Objective.NSCL:
        return nscl_anchor_loss(av)
    raise ValueError(f"per-anchor similarity losses exist for CL and NSCL only, not {kind.value}")


def batch_loss(kind: Objective | str, anchors: list[AnchorView]) -> float:
    if not anchors:
        raise ValueError("batch_loss needs at least one anchor")
    return float(np.mean([anchor_loss(kind, av) for av in anchors]))


def anchor_grad(kind: Objective | str, av: AnchorView) -> np.ndarray:
    """Gradient of the per-anchor loss w.r.t. ``av.logits`` (aligned with ``av.keys``).

    CL gives ``(p - e_pos) / tau``. NSCL gives ``(q - e_pos) / tau``: the
    renormalised negatives pull up and the numerator's positive pulls down.
    """
    kind = Objective(kind)
    e_pos = np.zeros_like(av.logits)
    e_pos[av.pos_index] = 1.0
    if kind is Objective.CL:
        return (softmax_tau(av.logits, av.tau) - e_pos) / av.tau
    if kind is Objective.NSCL:
        return (softmax_pair(av).q - e_pos) / av.tau
    raise ValueError(f"unsupported objective {kind.value}")


@dataclass(frozen=True)
class SparseGrad:
    """Values on directed ``(row, col)`` coordinates; repeated coordinates add up."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_dict_values()))

    def to_dict(self) -> dict[tuple[int, int], float]:
        out: dict[tuple[int, int], float] = {}
        for r, c, v in zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()):
            out[(r, c)] = out.get((r, c), 0.0) + v
        return out

    def to_dict_values(self) -> np.ndarray:
        return np.array(list(self.to_dict().values()), dtype=np.float64)

    def to_dense(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape)
        np.add.at(out, (self.rows, self.cols), self.values)
        return out


def batch_grad(kind: Objective | str, anchors: list[AnchorView]) -> SparseGrad:
    """``G = (1/B) sum_i g_i`` placed on each anchor's ``(anchor, key)`` coordinates."""
    if not anchors:
        raise ValueError("batch_grad needs at least one anchor")
    B = len(anchors)
    rows, cols, vals = [], [], []
    for av in anchors:
        g = anchor_grad(kind, av) / B
        rows.extend([av.anchor] * len(av.keys))
        cols.extend(av.keys)
        vals.extend(g.tolist())
    return SparseGrad(np.array(rows), np.array(cols), np.array(vals))


def reweighting_gap(sp: SoftmaxPair) -> tuple[float, float]:
    d = sp.p - sp.q
    return float(np.abs(d).sum()), float(np.linalg.norm(d))


def partition_sums(av: AnchorView) -> dict[str, float]:
    """``Z_S`` over the positive, negative and full denominator subsets."""
    e = np.exp(av.logits / av.tau)
    return {"pos": float(e[av.is_pos].sum()), "neg": float(e[~av.is_pos].sum()), "all": float(e.sum())}


def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.diag(p) - np.outer(p, p)


# ---------------------------------------------------------------------------
# Vectorised batch layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchLayout:
    """Masks for a ``B x 2B`` logit array of one realised batch.

    ``slots[k]`` is the state slot (row/column of the similarity matrix) read
    at key position ``k``; ``labels[k]`` its class.
    """

    slots: np.ndarray
    labels: np.ndarray

    @property
    def B(self) -> int:
        return self.slots.shape[0] // 2

    @property
    def anchor_slots(self) -> np.ndarray:
        return self.slots[0::2]

    @property
    def anchor_labels(self) -> np.ndarray:
        return self.labels[0::2]

    @property
    def denom_mask(self) -> np.ndarray:
        B = self.B
        mask = np.ones((B, 2 * B), dtype=bool)
        mask[np.arange(B), 2 * np.arange(B)] = False
        return mask

    @property
    def pos_mask(self) -> np.ndarray:
        return self.denom_mask & (self.anchor_labels[:, None] == self.labels[None, :])

    @property
    def neg_mask(self) -> np.ndarray:
        return self.denom_mask & (self.anchor_labels[:, None] != self.labels[None, :])

    @property
    def positive_onehot(self) -> np.ndarray:
        B = self.B
        out = np.zeros((B, 2 * B))
        out[np.arange(B), 2 * np.arange(B) + 1] = 1.0
        return out

    def gather(self, sim: np.ndarray) -> np.ndarray:
        """Logits ``sim[anchor_slot, key_slot]`` for every (anchor, key position)."""
        return sim[np.ix_(self.anchor_slots, self.slots)]

    def anchor_views(self, logits: np.ndarray, tau: float) -> list[AnchorView]:
        """Per-anchor views keyed by batch position (keys are key positions)."""
        denom, pos = self.denom_mask, self.pos_mask
        out = []
        for s in range(self.B):
            keys = tuple(int(k) for k in np.flatnonzero(denom[s]))
            out.append(
                AnchorView(
                    anchor=2 * s,
                    positive=2 * s + 1,
                    keys=keys,
                    logits=logits[s, list(keys)],
                    is_pos=pos[s, list(keys)],
                    tau=tau,
                )
            )
        return out

    def to_slot_grad(self, grad: np.ndarray) -> SparseGrad:
        """Map a ``B x 2B`` gradient onto state slots, dropping the fixed diagonal."""
        B = self.B
        rows = np.repeat(self.anchor_slots, 2 * B)
        cols = np.tile(self.slots, B)
        vals = grad.reshape(-1)
        keep = self.denom_mask.reshape(-1) & (rows != cols)
        return SparseGrad(rows[keep], cols[keep], vals[keep])


def layout_from_indices(base_indices: np.ndarray, labels: np.ndarray) -> BatchLayout:
    """Layout for a batch over a ``2N`` slot state (slot ``2i + v`` is view ``v`` of sample ``i``)."""
    idx = np.asarray(base_indices, dtype=np.int64)
    slots = np.stack([2 * idx, 2 * idx + 1], axis=1).reshape(-1)
    return BatchLayout(slots=slots, labels=np.repeat(np.asarray(labels, dtype=np.int64), 2))


def masked_softmax(logits: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    """Row-wise softmax restricted to ``mask``; rows with an empty mask are all zero."""
    z = np.where(mask, logits / tau, -np.inf)
    top = z.max(axis=1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(z - top), 0.0)
    tot = e.sum(axis=1, keepdims=True)
    return np.divide(e, tot, out=np.zeros_like(e), where=tot > 0)


def _masked_lse(logits: np.ndarray, mask: np.ndarray, tau: float) -> np.ndarray:
    z = np.where(mask, logits / tau, -np.inf)
    top = z.max(axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.where(mask, np.exp(z - safe[:, None]), 0.0).sum(axis=1))


def denominator_mask(kind: Objective, layout: BatchLayout) -> np.ndarray:
    if kind is Objective.CL or kind is Objective.SCL:
        return layout.denom_mask
    if kind is Objective.NSCL:
        return layout.neg_mask
    if kind is Objective.DCL:
        return layout.denom_mask & (layout.positive_onehot == 0)
    raise ValueError(f"{kind.value} is not a similarity-space objective")


@dataclass(frozen=True)
class LayoutResult:
    loss: float
    grad: np.ndarray
    skipped: int
    per_anchor: np.ndarray


def layout_loss_grad(
    kind: Objective | str,
    logits: np.ndarray,
    layout: BatchLayout,
    tau: float,
    strict: bool = False,
) -> LayoutResult:
    """Batch loss and gradient ``dL/dlogits`` (``B x 2B``) for a similarity objective.

    CL, NSCL and DCL share ``(softmax over their denominator - e_pos) / tau``.
    SCL (log outside the positive average) uses ``(p - uniform over positives) / tau``.
    Anchors whose denominator is empty contribute zero loss and gradient (the
    batch still divides by ``B``), unless ``strict`` is set, in which case
    :class:`PositiveOnlyBatch` is raised.
    """
    kind = Objective(kind)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    B = layout.B
    mask = denominator_mask(kind, layout)
    valid = mask.any(axis=1)
    if strict and not valid.all():
        raise PositiveOnlyBatch(f"{int((~valid).sum())} anchors have an empty {kind.value} denominator")
    lse = _masked_lse(logits, mask, tau)
    r = masked_softmax(logits, mask, tau)
    if kind is Objective.SCL:
        pos = layout.pos_mask.astype(np.float64)
        target = pos / pos.sum(axis=1, keepdims=True)
        per_anchor = lse - (target * logits / tau).sum(axis=1)
    else:
        target = layout.positive_onehot
        per_anchor = lse - logits[np.arange(B), 2 * np.arange(B) + 1] / tau
    grad = (r - target) / tau
    grad[~valid] = 0.0
    per_anchor = np.where(valid, per_anchor, np.nan)
    loss = float(np.nansum(per_anchor)) / B if valid.any() else float("nan")
    return LayoutResult(loss=loss, grad=grad / B, skipped=int((~valid).sum()), per_anchor=per_anchor)
