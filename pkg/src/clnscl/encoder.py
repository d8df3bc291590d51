"""A tiny tanh MLP encoder with hand-written backprop, and coupled SGD runs over it."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coupled import ScheduleSpec, SimState, surrogate_step
from .datagen import (
    DOMAIN_HEAD,
    DOMAIN_PARAMS,
    AugmentationKernel,
    Dataset,
    batch_views,
    draw_batch,
    negative_fractions,
    rng_for,
)
from .metrics import CkaUndefined, RsaUndefined, linear_cka, relative_weight_gap, rsa
from .simcore import BatchLayout, Objective, layout_from_indices, layout_loss_grad

ENCODER_TRACE_COLUMNS = ("epoch", "objective", "e_t", "relative_weight_gap", "cka_vs_cl", "rsa_vs_cl", "loss")
CHECKPOINT_MAGIC = b"CLNSCLW\x00"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Layer ``l`` maps ``x -> W_l x + b_l``; tanh between layers, l2 normalisation at the end."""

    weights: list[np.ndarray]
    biases: list[np.ndarray | None]

    def __post_init__(self) -> None:
        if not self.weights or len(self.weights) != len(self.biases):
            raise ValueError("need one (possibly None) bias per weight matrix")
        self.weights = [np.asarray(W, dtype=np.float64) for W in self.weights]
        self.biases = [None if b is None else np.asarray(b, dtype=np.float64) for b in self.biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or (b is not None and b.shape != (W.shape[0],)):
                raise ValueError(f"layer {l} has inconsistent shapes")
            if l > 0 and W.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l} input {W.shape[1]} != previous output {self.weights[l - 1].shape[0]}")
            if not np.all(np.isfinite(W)) or (b is not None and not np.all(np.isfinite(b))):
                raise ValueError(f"layer {l} has non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def layer_arrays(self) -> list[np.ndarray]:
        """Per layer, the weights and bias flattened into one vector."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W.ravel() if b is None else np.concatenate([W.ravel(), b]))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate(self.layer_arrays())

    @property
    def size(self) -> int:
        return sum(a.size for a in self.layer_arrays())

    def with_flat(self, vec: np.ndarray) -> "EncoderParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {vec.shape}")
        Ws, bs, k = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(vec[k : k + W.size].reshape(W.shape))
            k += W.size
            if b is None:
                bs.append(None)
            else:
                bs.append(vec[k : k + b.size].copy())
                k += b.size
        return EncoderParams([W.copy() for W in Ws], bs)

    def copy(self) -> "EncoderParams":
        return self.with_flat(self.flat())


@dataclass
class Head:
    """Linear classification head ``logits = W z + b`` used by the CE objective."""

    W: np.ndarray
    b: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b])

    def with_flat(self, vec: np.ndarray) -> "Head":
        k = self.W.size
        return Head(vec[:k].reshape(self.W.shape).copy(), vec[k:].copy())


def init_params(m: int, hidden: int | None, d: int, seed: int, bias: bool = True) -> EncoderParams:
    """Gaussian init with variance ``1/fan_in``; ``hidden=None`` gives a single linear layer."""
    rng = rng_for(seed, DOMAIN_PARAMS)
    dims = [m, d] if hidden is None else [m, hidden, d]
    Ws = [rng.standard_normal((o, i)) / np.sqrt(i) for i, o in zip(dims[:-1], dims[1:])]
    bs = [np.zeros(o) if bias else None for o in dims[1:]]
    return EncoderParams(Ws, bs)


def init_head(d: int, C: int, seed: int) -> Head:
    rng = rng_for(seed, DOMAIN_HEAD)
    return Head(rng.standard_normal((C, d)) / np.sqrt(d), np.zeros(C))


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    activations: list[np.ndarray]
    y: np.ndarray
    norms: np.ndarray
    z: np.ndarray


def forward_cache(params: EncoderParams, X: np.ndarray) -> ForwardCache:
    a = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if a.shape[1] != params.in_dim:
        raise ValueError(f"input dimension {a.shape[1]} != {params.in_dim}")
    inputs, acts = [], []
    L = len(params.weights)
    for l, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        pre = a @ W.T if b is None else a @ W.T + b
        if l < L - 1:
            a = np.tanh(pre)
            acts.append(a)
        else:
            a = pre
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise ValueError("encoder output is zero; normalisation undefined")
    return ForwardCache(inputs, acts, a, norms, a / norms[:, None])


def forward(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    """Unit-norm embeddings, one row per input row."""
    X = np.asarray(X, dtype=np.float64)
    Z = forward_cache(params, X).z
    return Z[0] if X.ndim == 1 else Z


EMBEDDINGS = ("output", "hidden")


def embed(params: EncoderParams, X: np.ndarray, layer: str = "output") -> np.ndarray:
    """Rows used for alignment metrics: the normalised output or the last tanh activation."""
    if layer == "output":
        return forward(params, X)
    if layer != "hidden":
        raise ValueError(f"embedding must be one of {EMBEDDINGS}, got {layer!r}")
    if len(params.weights) < 2:
        raise ValueError("embedding = hidden needs an encoder with a hidden layer")
    return forward_cache(params, X).activations[-1]


def backprop(params: EncoderParams, cache: ForwardCache, dZ: np.ndarray, per_sample: bool = False):
    """Pull ``dL/dZ`` back to the parameters.

    Returns an :class:`EncoderParams` of gradients, or with ``per_sample`` an
    ``(n, p)`` array of per-row gradient contributions in ``flat()`` order.
    """
    z, nrm = cache.z, cache.norms
    g = (dZ - z * np.sum(z * dZ, axis=1, keepdims=True)) / nrm[:, None]
    L = len(params.weights)
    gW: list = [None] * L
    gb: list = [None] * L
    for l in range(L - 1, -1, -1):
        x = cache.inputs[l]
        if per_sample:
            gW[l] = np.einsum("no,ni->noi", g, x).reshape(g.shape[0], -1)
            gb[l] = None if params.biases[l] is None else g
        else:
            gW[l] = g.T @ x
            gb[l] = None if params.biases[l] is None else g.sum(axis=0)
        if l > 0:
            g = (g @ params.weights[l]) * (1.0 - cache.activations[l - 1] ** 2)
    if per_sample:
        cols = []
        for W_, b_ in zip(gW, gb):
            cols.append(W_)
            if b_ is not None:
                cols.append(b_)
        return np.concatenate(cols, axis=1)
    return EncoderParams(gW, gb)


def output_jacobian(params: EncoderParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Z, J)`` with ``J[i, j, :] = d z_ij / d w`` (shape ``(n, d, p)``)."""
    cache = forward_cache(params, X)
    n, d = cache.z.shape
    J = np.empty((n, d, params.size))
    for j in range(d):
        E = np.zeros((n, d))
        E[:, j] = 1.0
        J[:, j, :] = backprop(params, cache, E, per_sample=True)
    return cache.z, J


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


@dataclass
class LossGrad:
    loss: float
    grad: EncoderParams
    head_grad: Head | None = None
    skipped: int = 0


def batch_layout(labels: np.ndarray) -> BatchLayout:
    """Layout over ``2B`` fresh views stored in batch order."""
    labels = np.asarray(labels, dtype=np.int64)
    return BatchLayout(slots=np.arange(2 * labels.shape[0]), labels=np.repeat(labels, 2))


def similarity_loss_grad(
    kind: Objective | str,
    params: EncoderParams,
    inputs: np.ndarray,
    layout: BatchLayout,
    tau: float,
) -> LossGrad:
    """A similarity objective on the cosine logits ``z_anchor . z_key``; rows of ``inputs`` are slots."""
    kind = Objective(kind)
    cache = forward_cache(params, inputs)
    Z = cache.z
    Za, Zk = Z[layout.anchor_slots], Z[layout.slots]
    res = layout_loss_grad(kind, Za @ Zk.T, layout, tau)
    dZ = np.zeros_like(Z)
    np.add.at(dZ, layout.anchor_slots, res.grad @ Zk)
    np.add.at(dZ, layout.slots, res.grad.T @ Za)
    return LossGrad(res.loss, backprop(params, cache, dZ), skipped=res.skipped)


def ce_loss_grad(params: EncoderParams, head: Head, views: np.ndarray, labels: np.ndarray) -> LossGrad:
    """Mean softmax cross-entropy of the linear head over both views of every sample."""
    y = np.repeat(np.asarray(labels, dtype=np.int64), 2)
    cache = forward_cache(params, views)
    Z = cache.z
    logits = Z @ head.W.T + head.b
    logits = logits - logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    n = Z.shape[0]
    loss = float(-logp[np.arange(n), y].mean())
    R = np.exp(logp)
    R[np.arange(n), y] -= 1.0
    R /= n
    head_grad = Head(R.T @ Z, R.sum(axis=0))
    return LossGrad(loss, backprop(params, cache, R @ head.W), head_grad=head_grad)


def loss_and_grad(
    objective: Objective | str,
    params: EncoderParams,
    views: np.ndarray,
    labels: np.ndarray,
    tau: float,
    head: Head | None = None,
) -> LossGrad:
    """Batch loss and exact parameter gradient.

    ``views`` holds ``2B`` rows in batch order (view 1 then view 2 of each
    sample); ``labels`` holds the ``B`` sample labels.
    """
    objective = Objective(objective)
    if views.shape[0] != 2 * len(labels):
        raise ValueError("need two views per labelled sample")
    if objective is Objective.CE:
        if head is None:
            raise ValueError("the CE objective needs a classification head")
        return ce_loss_grad(params, head, views, labels)
    return similarity_loss_grad(objective, params, views, batch_layout(labels), tau)


def sgd_update(params: EncoderParams, grad: EncoderParams, eta: float) -> EncoderParams:
    return params.with_flat(params.flat() - eta * grad.flat())


# ---------------------------------------------------------------------------
# Pairwise similarity gradients and smoothness constants
# ---------------------------------------------------------------------------


def pair_similarity_grad(params: EncoderParams, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``grad_w cos(f_w(u), f_w(v))`` as a flat vector; identical inputs are rejected."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if np.array_equal(u, v):
        raise ValueError("degenerate pair: u == v gives an identically zero similarity gradient")
    Z, J = output_jacobian(params, np.stack([u, v]))
    return J[0].T @ Z[1] + J[1].T @ Z[0]


def max_pair_grad_norm(params: EncoderParams, X: np.ndarray, chunk: int = 32) -> float:
    """``max_{a != b} ||grad_w z_a . z_b||`` over distinct rows of ``X``."""
    Z, J = output_jacobian(params, X)
    n = Z.shape[0]
    A = np.einsum("adp,bd->abp", J, Z)  # A[a, b] = J_a^T z_b
    best = 0.0
    for s in range(0, n, chunk):
        V = A[s : s + chunk] + A[:, s : s + chunk].transpose(1, 0, 2)
        norms = np.linalg.norm(V, axis=2)
        rows = np.arange(s, min(s + chunk, n))
        same = np.all(X[rows][:, None, :] == X[None, :, :], axis=2)
        norms[same] = 0.0
        best = max(best, float(norms.max()))
    return best


@dataclass
class SmoothnessEstimate:
    beta: float
    G: float
    pairs: int
    caveat: str = "estimated lower bound of a supremum"


def lipschitz_ratio(grad_fn, w: np.ndarray, v: np.ndarray) -> float:
    dist = float(np.linalg.norm(w - v))
    if dist == 0.0:
        raise ValueError("degenerate pair: zero parameter distance")
    return float(np.linalg.norm(grad_fn(w) - grad_fn(v))) / dist


def estimate_smoothness_constants(
    params: EncoderParams,
    batches: list[tuple[np.ndarray, np.ndarray]],
    tau: float,
    n_pairs: int = 100,
    radius: float = 0.1,
    seed: int = 0,
    objectives: tuple[Objective, ...] = (Objective.CL, Objective.NSCL),
) -> SmoothnessEstimate:
    """Empirical ``beta`` and ``G`` around ``params``.

    ``beta`` is the largest gradient-difference ratio over ``n_pairs`` random
    parameter pairs drawn from the ball of the given radius; ``G`` the largest
    pairwise similarity-gradient norm over the batch views at every sampled
    point. Both can only under-estimate the true suprema.
    """
    if n_pairs < 1 or not batches:
        raise ValueError("need at least one pair and one batch")
    rng = np.random.default_rng(seed)
    w0 = params.flat()

    def ball_point() -> np.ndarray:
        u = rng.standard_normal(w0.size)
        return w0 + radius * rng.uniform() ** (1 / w0.size) * u / np.linalg.norm(u)

    beta, G = 0.0, 0.0
    for k in range(n_pairs):
        views, labels = batches[k % len(batches)]
        kind = objectives[k % len(objectives)]

        def grad_fn(vec, views=views, labels=labels, kind=kind):
            return loss_and_grad(kind, params.with_flat(vec), views, labels, tau).grad.flat()

        w, v = ball_point(), ball_point()
        beta = max(beta, lipschitz_ratio(grad_fn, w, v))
        if k < len(batches):
            G = max(G, max_pair_grad_norm(params.with_flat(w), views))
    return SmoothnessEstimate(beta=beta, G=G, pairs=n_pairs)


# ---------------------------------------------------------------------------
# Coupled encoder runs
# ---------------------------------------------------------------------------


@dataclass
class EncoderRecord:
    epoch: int
    objective: str
    e_t: float
    relative_weight_gap: float
    cka_vs_cl: float
    rsa_vs_cl: float
    loss: float


@dataclass
class CoupledEncoderTrace:
    records: list[EncoderRecord]
    params: dict[str, EncoderParams] = field(repr=False)
    heads: dict[str, Head] = field(default_factory=dict, repr=False)
    grad_gaps: list[float] = field(default_factory=list)
    pair_grad_norms: list[float] = field(default_factory=list)
    min_neg_fractions: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def series(self, objective: str, column: str) -> np.ndarray:
        return np.array([getattr(r, column) for r in self.records if r.objective == objective])

    def final(self, objective: str) -> EncoderRecord:
        return [r for r in self.records if r.objective == objective][-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(ENCODER_TRACE_COLUMNS)
        for r in self.records:
            writer.writerow(
                [r.epoch, r.objective, repr(r.e_t), repr(r.relative_weight_gap),
                 repr(r.cka_vs_cl), repr(r.rsa_vs_cl), repr(r.loss)]
            )
        return buf.getvalue()


def weight_gap(a: EncoderParams, b: EncoderParams) -> tuple[float, float]:
    """``(||a - b||, sum over layers of the relative Frobenius gap)``."""
    return float(np.linalg.norm(a.flat() - b.flat())), relative_weight_gap(a.layer_arrays(), b.layer_arrays())


def _safe(fn, *args) -> float:
    try:
        return fn(*args)
    except (CkaUndefined, RsaUndefined):
        return float("nan")


def run_coupled_encoders(
    objectives: list[Objective | str],
    dataset: Dataset,
    kernel: AugmentationKernel,
    B: int,
    schedule: ScheduleSpec,
    tau: float,
    master_seed: int,
    probe: tuple[np.ndarray, np.ndarray],
    hidden: int | None = 32,
    out_dim: int = 16,
    steps_per_epoch: int | None = None,
    init: EncoderParams | None = None,
    track_pair_grads: bool = False,
    embedding: str = "output",
) -> CoupledEncoderTrace:
    """Train one encoder per objective from a shared init on a shared batch stream.

    Records at epoch 0 (before training) and after every ``steps_per_epoch``
    steps (default ``ceil(N / B)``) plus the final step. ``grad_gaps`` holds
    the CL-vs-NSCL gradient gap evaluated at the CL iterate when both are run;
    with ``track_pair_grads`` the largest pairwise similarity-gradient norm
    over the batch views at that iterate goes to ``pair_grad_norms``.
    ``embedding`` picks the probe representation compared against CL.
    """
    if embedding not in EMBEDDINGS:
        raise ValueError(f"embedding must be one of {EMBEDDINGS}, got {embedding!r}")
    objs = [Objective(o) for o in objectives]
    if Objective.CL not in objs:
        raise ValueError("objectives must include CL")
    objs = [Objective.CL] + [o for o in objs if o is not Objective.CL]
    probe_X, _ = probe
    w0 = init.copy() if init is not None else init_params(dataset.m, hidden, out_dim, master_seed)
    params = {o.value: w0.copy() for o in objs}
    heads = {}
    if Objective.CE in objs:
        heads[Objective.CE.value] = init_head(w0.out_dim, dataset.C, master_seed)
    per_epoch = steps_per_epoch or -(-dataset.N // B)
    losses: dict[str, list[float]] = {o.value: [] for o in objs}
    records: list[EncoderRecord] = []
    gaps, fracs, pair_norms = [], [], []

    def record(epoch: int, first: tuple | None = None) -> None:
        Z_cl = embed(params["CL"], probe_X, embedding)
        for o in objs:
            name = o.value
            if first is not None:
                views, labels = first
                loss = loss_and_grad(o, params[name], views, labels, tau, heads.get(name)).loss
            else:
                loss = float(np.mean(losses[name]))
                losses[name].clear()
            e, rel = weight_gap(params["CL"], params[name])
            Z = embed(params[name], probe_X, embedding)
            records.append(EncoderRecord(epoch, name, e, rel, _safe(linear_cka, Z_cl, Z), _safe(rsa, Z_cl, Z), loss))

    for t in range(schedule.T):
        batch = draw_batch(dataset, B, t, master_seed)
        views = batch_views(dataset, batch, kernel.noise_scale)
        if t == 0:
            record(0, first=(views, batch.labels))
        eta = schedule.eta_at(t)
        fracs.append(float(negative_fractions(batch.labels).min()))
        step_grads = {}
        for o in objs:
            name = o.value
            lg = loss_and_grad(o, params[name], views, batch.labels, tau, heads.get(name))
            losses[name].append(lg.loss)
            step_grads[name] = lg
        if Objective.NSCL in objs:
            ns_at_cl = loss_and_grad(Objective.NSCL, params["CL"], views, batch.labels, tau)
            gaps.append(float(np.linalg.norm(step_grads["CL"].grad.flat() - ns_at_cl.grad.flat())))
        if track_pair_grads:
            pair_norms.append(max_pair_grad_norm(params["CL"], views))
        for name, lg in step_grads.items():
            params[name] = sgd_update(params[name], lg.grad, eta)
            if lg.head_grad is not None:
                h = heads[name]
                heads[name] = h.with_flat(h.flat() - eta * lg.head_grad.flat())
        if (t + 1) % per_epoch == 0 or t + 1 == schedule.T:
            record(-(-(t + 1) // per_epoch))
    if schedule.T == 0:
        for o in objs:
            records.append(EncoderRecord(0, o.value, 0.0, 0.0, 1.0, 1.0, float("nan")))
    return CoupledEncoderTrace(
        records=records,
        params=params,
        heads=heads,
        grad_gaps=gaps,
        pair_grad_norms=pair_norms,
        min_neg_fractions=fracs,
        config={"B": B, "tau": tau, "master_seed": master_seed, "C": dataset.C, "N": dataset.N},
    )


# ---------------------------------------------------------------------------
# Parameter-space versus similarity-space descent
# ---------------------------------------------------------------------------


def gram(params: EncoderParams, X: np.ndarray) -> np.ndarray:
    Z = forward(params, X)
    S = np.clip(Z @ Z.T, -1.0, 1.0)
    np.fill_diagonal(S, 1.0)
    return S


def similarity_jacobian(params: EncoderParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(Sigma, J)`` with ``J`` of shape ``(n*n, p)``: row ``a*n + b`` is ``grad_w Sigma_ab``."""
    Z, Jz = output_jacobian(params, X)
    A = np.einsum("adp,bd->abp", Jz, Z)
    n = Z.shape[0]
    J = (A + A.transpose(1, 0, 2)).reshape(n * n, -1)
    return Z @ Z.T, J


def estimate_jacobian_constants(
    params_list: list[EncoderParams], X: np.ndarray, n_dirs: int = 20, radius: float = 1e-2, seed: int = 0
) -> tuple[float, float]:
    """Empirical ``(L_Sigma, M_Sigma)``: Jacobian operator norm and second-order remainder ratio."""
    rng = np.random.default_rng(seed)
    L_hat, M_hat = 0.0, 0.0
    for params in params_list:
        S0, J = similarity_jacobian(params, X)
        L_hat = max(L_hat, float(np.linalg.norm(J, 2)))
        w = params.flat()
        for _ in range(n_dirs):
            dw = rng.standard_normal(w.size)
            dw *= radius * rng.uniform(0.1, 1.0) / np.linalg.norm(dw)
            Z1 = forward(params.with_flat(w + dw), X)
            rem = Z1 @ Z1.T - S0 - (J @ dw).reshape(S0.shape)
            M_hat = max(M_hat, 2 * float(np.linalg.norm(rem)) / float(dw @ dw))
    return L_hat, M_hat


@dataclass
class FidelityTrace:
    E: np.ndarray
    etas: np.ndarray
    xi: np.ndarray
    L_sigma: float
    M_sigma: float
    clip_events: int


def run_fidelity(
    dataset: Dataset,
    kernel: AugmentationKernel,
    B: int,
    schedule: ScheduleSpec,
    tau: float,
    master_seed: int,
    objective: Objective | str = Objective.CL,
    hidden: int | None = 8,
    out_dim: int = 8,
    n_probe_params: int = 3,
) -> FidelityTrace:
    """Parameter SGD on the reference views versus similarity descent from the induced start.

    Both consume the same batches. ``E[t]`` is ``||Sigma(w_t) - Sigma_surrogate_t||_F``;
    ``xi[t]`` is the squared parameter-gradient norm; ``L_sigma``, ``M_sigma``
    are estimated at a few iterates along the parameter trajectory.
    """
    from .datagen import reference_views

    X = reference_views(dataset, kernel)
    params = init_params(dataset.m, hidden, out_dim, master_seed)
    surrogate = SimState(gram(params, X))
    etas = schedule.etas()
    E = [0.0]
    xi, clips = [], 0
    probes = {0}
    if schedule.T > 1:
        probes |= set(np.linspace(0, schedule.T - 1, n_probe_params).astype(int).tolist())
    sampled = []
    for t in range(schedule.T):
        if t in probes:
            sampled.append(params.copy())
        batch = draw_batch(dataset, B, t, master_seed)
        layout = layout_from_indices(batch.base_indices, batch.labels)
        lg = similarity_loss_grad(objective, params, X, layout, tau)
        xi.append(float(lg.grad.flat() @ lg.grad.flat()))
        res = layout_loss_grad(objective, layout.gather(surrogate.entries), layout, tau)
        surrogate, c = surrogate_step(surrogate, layout.to_slot_grad(res.grad), etas[t])
        clips += c
        params = sgd_update(params, lg.grad, etas[t])
        E.append(float(np.linalg.norm(gram(params, X) - surrogate.entries)))
    if not sampled:
        sampled = [params]
    L_hat, M_hat = estimate_jacobian_constants(sampled, X, seed=master_seed)
    return FidelityTrace(np.array(E), etas, np.array(xi), L_hat, M_hat, clips)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    """Little-endian: magic, version, layer count, then per layer (rows, cols, has_bias) and data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params.weights)))
        for W, b in zip(params.weights, params.biases):
            fh.write(struct.pack("<III", W.shape[0], W.shape[1], int(b is not None)))
        for W, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            if b is not None:
                fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> EncoderParams:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an encoder checkpoint")
    version, L = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    shapes = []
    for _ in range(L):
        shapes.append(struct.unpack_from("<III", data, off))
        off += 12
    Ws, bs = [], []
    for r, c, has_b in shapes:
        Ws.append(np.frombuffer(data, dtype="<f8", count=r * c, offset=off).reshape(r, c).astype(np.float64))
        off += 8 * r * c
        if has_b:
            bs.append(np.frombuffer(data, dtype="<f8", count=r, offset=off).astype(np.float64))
            off += 8 * r
        else:
            bs.append(None)
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return EncoderParams(Ws, bs)
