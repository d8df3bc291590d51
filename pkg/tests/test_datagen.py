import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clnscl.datagen import (
    AugmentationKernel,
    Dataset,
    apply_augmentation,
    augment,
    batch_views,
    draw_batch,
    make_dataset,
    negative_fractions,
    reference_views,
    split_holdout,
    sub_seed,
    view_seed,
    view_seeds,
)


def test_infinite_separation_gives_the_means():
    ds = make_dataset(2, 1, 2, math.inf, seed=0)
    assert ds.labels.tolist() == [0, 1]
    assert np.allclose(ds.points, ds.means)
    assert np.allclose(np.linalg.norm(ds.points, axis=1), 1.0)


def test_balanced_counts():
    ds = make_dataset(10, 50, 16, 4.0, seed=7)
    assert ds.N == 500
    assert np.bincount(ds.labels).tolist() == [50] * 10


def test_empirical_means_near_generator_means():
    ds = make_dataset(3, 4, 8, 2.0, seed=1)
    for c in range(3):
        emp = ds.points[ds.labels == c].mean(axis=0)
        cos = emp @ ds.means[c] / np.linalg.norm(emp)
        assert math.degrees(math.acos(min(1.0, cos))) < 30


@given(C=st.integers(2, 6), n=st.integers(1, 5), m=st.integers(2, 10), seed=st.integers(0, 2**32))
def test_dataset_invariants(C, n, m, seed):
    ds = make_dataset(C, n, m, 2.0, seed)
    assert np.all(np.abs(np.linalg.norm(ds.points, axis=1) - 1) <= 1e-9)
    assert np.all(np.bincount(ds.labels, minlength=C) == n)


def test_same_seed_same_dataset():
    a, b = make_dataset(4, 3, 5, 2.0, 9), make_dataset(4, 3, 5, 2.0, 9)
    assert np.array_equal(a.points, b.points)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        make_dataset(1, 3, 4, 2.0, 0)
    with pytest.raises(ValueError):
        make_dataset(2, 3, 4, 0.0, 0)
    with pytest.raises(ValueError):
        Dataset(np.ones((3, 2)) / np.sqrt(2), np.array([0, 0, 1]), C=2, n=1)


def test_csv_roundtrip(tmp_path):
    ds = make_dataset(3, 4, 5, 2.0, 3)
    ds.to_csv(tmp_path / "d.csv")
    back = Dataset.from_csv(tmp_path / "d.csv")
    assert np.array_equal(back.points, ds.points)
    assert np.array_equal(back.labels, ds.labels)
    assert (tmp_path / "d.csv").read_text().splitlines()[0].startswith("index,label,x0")


def test_split_holdout_keeps_balance():
    ds = make_dataset(3, 6, 4, 2.0, 0)
    train, held = split_holdout(ds, 2)
    assert train.n == 4 and held.n == 2
    assert np.bincount(held.labels).tolist() == [2, 2, 2]
    rows = {tuple(r) for r in np.vstack([train.points, held.points])}
    assert rows == {tuple(r) for r in ds.points}


def test_zero_noise_is_identity():
    x = make_dataset(2, 1, 6, 2.0, 0).points[0]
    assert np.array_equal(augment(x, 0.0, 5), x)


def test_same_key_same_view():
    x = make_dataset(2, 1, 6, 2.0, 0).points[0]
    k = AugmentationKernel(0.1, 42)
    assert np.array_equal(apply_augmentation(x, k, (3, 1, 0)), apply_augmentation(x, k, (3, 1, 0)))
    assert not np.array_equal(apply_augmentation(x, k, (3, 1, 0)), apply_augmentation(x, k, (3, 1, 1)))


def test_augmentation_cosine_range():
    # Mean cosine over 1000 keys; individual draws can dip below 0.9 in the tail.
    x = make_dataset(2, 1, 16, 2.0, 0).points[0]
    k = AugmentationKernel(0.1, 1)
    cos = np.array([apply_augmentation(x, k, (t, 0, 0)) @ x for t in range(1000)])
    assert np.all(cos < 1.0)
    assert 0.9 < cos.mean() < 1.0


def test_view_seeds_prefix_stable():
    full = view_seeds(5, 2, 10)
    assert np.array_equal(view_seeds(5, 2, 3), full[:3])
    assert view_seed(5, 2, 7, 1) == int(full[7, 1])
    assert not np.array_equal(view_seeds(5, 2, 4), view_seeds(5, 3, 4))


def test_single_point_population():
    ds = make_dataset(2, 1, 3, 2.0, 0)
    one = Dataset(ds.points[:1], np.array([0]), C=1, n=1)
    assert draw_batch(one, 4, 0, 0).base_indices.tolist() == [0, 0, 0, 0]


def test_same_step_same_batch():
    ds = make_dataset(4, 5, 3, 2.0, 0)
    assert draw_batch(ds, 8, 3, 11) == draw_batch(ds, 8, 3, 11)
    assert draw_batch(ds, 8, 3, 11) != draw_batch(ds, 8, 4, 11)
    with pytest.raises(ValueError):
        draw_batch(ds, 1, 0, 0)


def test_negative_fraction_hoeffding():
    ds = make_dataset(10, 100, 2, 2.0, 0)
    B, eps, draws = 512, 0.05, 10_000
    fails = 0
    for t in range(draws):
        frac = negative_fractions(draw_batch(ds, B, t, 3).labels)
        fails += abs(frac[0] - 0.9) > eps
    assert fails / draws <= 2 * math.exp(-2 * B * eps**2) + 3 * math.sqrt(0.25 / draws)


def test_batch_views_layout():
    ds = make_dataset(3, 4, 5, 2.0, 0)
    b = draw_batch(ds, 4, 0, 1)
    V = batch_views(ds, b, 0.0)
    assert np.array_equal(V[0::2], ds.points[b.base_indices])
    assert np.array_equal(V[1::2], ds.points[b.base_indices])


def test_reference_views_slots():
    ds = make_dataset(3, 2, 5, 2.0, 0)
    V = reference_views(ds, AugmentationKernel(0.1, 4))
    assert V.shape == (12, 5)
    assert np.allclose(np.linalg.norm(V, axis=1), 1.0)
    assert np.array_equal(V, reference_views(ds, AugmentationKernel(0.1, 4)))


def test_sub_seed_rejects_negative_keys():
    with pytest.raises(ValueError):
        sub_seed(0, -1)
