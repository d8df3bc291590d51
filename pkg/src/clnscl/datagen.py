"""Synthetic class-balanced data, the augmentation kernel and the batch sampler.

All randomness is derived from ``(master_seed, domain, *key)`` through
:class:`numpy.random.SeedSequence`, so two coupled runs that replay the same
keys consume bit-identical draws without sharing any generator state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Seed domains. Keys are shifted by one where a step index may be -1.
DOMAIN_BATCH = 0
DOMAIN_AUG = 1
DOMAIN_DATA = 2
DOMAIN_PARAMS = 3
DOMAIN_HEAD = 4
DOMAIN_PROBE = 5
DOMAIN_TRIAL = 6
DOMAIN_CHILD = 7


def sub_seed(master_seed: int, *key: int) -> int:
    """Derive a 64-bit seed from a master seed and a tuple of nonnegative ints."""
    if any(k < 0 for k in key):
        raise ValueError(f"seed keys must be nonnegative, got {key}")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_for(master_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(sub_seed(master_seed, *key))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class Dataset:
    """Class-balanced set of unit-norm points with ``n`` points per class.

    Points are stored class-major: rows ``c*n .. (c+1)*n - 1`` carry label ``c``.
    ``means`` holds the generator's class means (unit norm) when known.
    """

    points: np.ndarray
    labels: np.ndarray
    C: int
    n: int
    means: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[0] != self.labels.shape[0]:
            raise ValueError("points must be (N, m) with one label per row")
        if self.points.shape[0] != self.C * self.n:
            raise ValueError(f"expected N = C*n = {self.C * self.n}, got {self.points.shape[0]}")
        counts = np.bincount(self.labels, minlength=self.C)
        if counts.shape[0] != self.C or np.any(counts != self.n):
            raise ValueError(f"dataset is not class-balanced: counts {counts.tolist()}")
        norms = np.linalg.norm(self.points, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("every point must have unit norm")

    @property
    def N(self) -> int:
        return self.C * self.n

    @property
    def m(self) -> int:
        return self.points.shape[1]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "label"] + [f"x{k}" for k in range(self.m)])
            for i, (row, y) in enumerate(zip(self.points, self.labels)):
                writer.writerow([i, int(y)] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        labels = np.array([int(r[1]) for r in body], dtype=np.int64)
        points = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
        C = int(labels.max()) + 1
        return cls(points=points, labels=labels, C=C, n=len(body) // C)


def make_dataset(C: int, n: int, m: int, class_separation: float, seed: int) -> Dataset:
    """Draw ``C`` class means uniformly on the sphere and ``n`` noisy points per class.

    Each point is ``normalize(mean + noise / class_separation)`` with isotropic
    Gaussian ``noise ~ N(0, I/m)``, so the noise norm is about ``1 / class_separation``
    in any dimension; ``class_separation = inf`` puts every point on its mean.
    """
    if C * n == 0 or C < 2 or n < 1:
        raise ValueError(f"need C >= 2 and n >= 1, got C={C}, n={n}")
    if m < 2:
        raise ValueError(f"ambient dimension must be >= 2, got m={m}")
    if class_separation <= 0:
        raise ValueError("class_separation must be positive")
    rng = rng_for(seed, DOMAIN_DATA)
    means = normalize_rows(rng.standard_normal((C, m)))
    labels = np.repeat(np.arange(C), n)
    spread = 0.0 if math.isinf(class_separation) else 1.0 / (class_separation * math.sqrt(m))
    noise = rng.standard_normal((C * n, m))
    points = normalize_rows(means[labels] + spread * noise)
    return Dataset(points=points, labels=labels, C=C, n=n, means=means)


def split_holdout(dataset: Dataset, n_holdout: int) -> tuple[Dataset, Dataset]:
    """Split off the last ``n_holdout`` points of every class as a held-out set."""
    if not 0 < n_holdout < dataset.n:
        raise ValueError(f"need 0 < n_holdout < n = {dataset.n}")
    within = np.tile(np.arange(dataset.n), dataset.C)
    held = within >= dataset.n - n_holdout
    part = lambda mask, n: Dataset(dataset.points[mask], dataset.labels[mask], dataset.C, n, dataset.means)
    return part(~held, dataset.n - n_holdout), part(held, n_holdout)


@dataclass(frozen=True)
class AugmentationKernel:
    """Additive Gaussian noise followed by renormalisation onto the sphere."""

    noise_scale: float
    master_seed: int = 0

    def __post_init__(self) -> None:
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")

    def seed_for(self, t: int, sample: int, view: int) -> int:
        return view_seed(self.master_seed, t, sample, view)


def view_seeds(master_seed: int, t: int, count: int) -> np.ndarray:
    """Seeds for the first ``count`` sample positions at step ``t``, shape ``(count, 2)``.

    Word ``2*sample + view`` of the step's seed stream; the stream is
    prefix-stable, so the seed of a key does not depend on ``count``.
    """
    if t < -1:
        raise ValueError(f"step key must be >= -1, got {t}")
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(DOMAIN_AUG, t + 1))
    return ss.generate_state(2 * count, dtype=np.uint64).reshape(count, 2)


def view_seed(master_seed: int, t: int, sample: int, view: int) -> int:
    """Seed of view ``view`` of batch position ``sample`` at step ``t`` (``t >= -1``)."""
    if sample < 0 or view not in (0, 1):
        raise ValueError(f"bad view key ({sample}, {view})")
    return int(view_seeds(master_seed, t, sample + 1)[sample, view])


def augment(point: np.ndarray, noise_scale: float, seed: int) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    if noise_scale == 0.0:
        return point.copy()
    noise = np.random.default_rng(seed).standard_normal(point.shape[-1])
    return normalize_rows(point + noise_scale * noise)


def apply_augmentation(point: np.ndarray, kernel: AugmentationKernel, key: tuple[int, int, int]) -> np.ndarray:
    """Draw one view of ``point``; identical keys give bit-identical views."""
    t, sample, view = key
    return augment(point, kernel.noise_scale, kernel.seed_for(t, sample, view))


@dataclass(frozen=True)
class BatchDraw:
    """One step's shared randomness.

    ``view_seeds[s, v]`` seeds view ``v`` of batch position ``s``.
    """

    t: int
    base_indices: np.ndarray
    labels: np.ndarray
    view_seeds: np.ndarray = field(repr=False)

    @property
    def B(self) -> int:
        return int(self.base_indices.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BatchDraw):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.base_indices, other.base_indices)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.view_seeds, other.view_seeds)
        )

    __hash__ = None  # type: ignore[assignment]


def draw_batch(dataset: Dataset, B: int, t: int, master_seed: int) -> BatchDraw:
    """Sample ``B`` base indices i.i.d. uniformly (with replacement) for step ``t``."""
    if B < 2:
        raise ValueError(f"batch size must be >= 2 (an anchor needs another key), got {B}")
    rng = rng_for(master_seed, DOMAIN_BATCH, t + 1)
    idx = rng.integers(0, dataset.N, size=B)
    return BatchDraw(
        t=t, base_indices=idx, labels=dataset.labels[idx], view_seeds=view_seeds(master_seed, t, B)
    )


def batch_views(dataset: Dataset, batch: BatchDraw, noise_scale: float) -> np.ndarray:
    """Augmented views in batch layout order ``[v1_0, v2_0, v1_1, v2_1, ...]``."""
    out = np.empty((2 * batch.B, dataset.m))
    for s, i in enumerate(batch.base_indices):
        for v in (0, 1):
            out[2 * s + v] = augment(dataset.points[i], noise_scale, int(batch.view_seeds[s, v]))
    return out


def reference_views(dataset: Dataset, kernel: AugmentationKernel) -> np.ndarray:
    """The fixed 2N view slots (slot ``2i + v``) drawn at step key ``t = -1``."""
    seeds = view_seeds(kernel.master_seed, -1, dataset.N)
    out = np.empty((2 * dataset.N, dataset.m))
    for i in range(dataset.N):
        for v in (0, 1):
            out[2 * i + v] = augment(dataset.points[i], kernel.noise_scale, int(seeds[i, v]))
    return out


def negative_fractions(labels: np.ndarray) -> np.ndarray:
    """Per anchor, the fraction of the ``B`` batch positions carrying another label."""
    labels = np.asarray(labels)
    return (labels[:, None] != labels[None, :]).mean(axis=1)
