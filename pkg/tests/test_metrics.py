import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from clnscl import metrics
from clnscl.metrics import (
    CkaUndefined,
    RsaUndefined,
    cka_chain,
    cka_from_grams,
    cosine_gram,
    frob_drift,
    linear_cka,
    linear_probe_accuracy,
    nccc_accuracy,
    offdiag_drift,
    rdm_vector,
    rsa,
    rsa_chain,
    rsa_from_grams,
)


def naive_cka(Z1, Z2):
    n = len(Z1)
    cos = lambda Z, i, j: float(Z[i] @ Z[j] / (math.sqrt(Z[i] @ Z[i]) * math.sqrt(Z[j] @ Z[j])))
    K1 = [[cos(Z1, i, j) for j in range(n)] for i in range(n)]
    K2 = [[cos(Z2, i, j) for j in range(n)] for i in range(n)]

    def centre(K):
        rows = [sum(r) / n for r in K]
        cols = [sum(K[i][j] for i in range(n)) / n for j in range(n)]
        tot = sum(rows) / n
        return [[K[i][j] - rows[i] - cols[j] + tot for j in range(n)] for i in range(n)]

    A, B = centre(K1), centre(K2)
    dot = lambda X, Y: sum(X[i][j] * Y[i][j] for i in range(n) for j in range(n))
    return dot(A, B) / math.sqrt(dot(A, A) * dot(B, B))


def naive_pearson(a, b):
    n = len(a)
    ma, mb = sum(a) / n, sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def test_cka_identity_and_sign_flip(rng):
    Z = rng.standard_normal((6, 3))
    assert math.isclose(linear_cka(Z, Z), 1.0)
    assert math.isclose(linear_cka(Z, -Z), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_cka_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    assert abs(linear_cka(Z1, Z2) - naive_cka(Z1, Z2)) < 1e-12


def test_cka_errors():
    with pytest.raises(CkaUndefined):
        cka_from_grams(np.eye(2), np.eye(2))
    with pytest.raises(CkaUndefined):
        cka_from_grams(np.ones((3, 3)), np.eye(3))
    with pytest.raises(ValueError):
        cka_from_grams(np.eye(3), np.eye(4))


@given(seed=st.integers(0, 2**31))
def test_centered_gram_rows_sum_to_zero(seed):
    Z = np.random.default_rng(seed).standard_normal((7, 4))
    K = metrics.center(cosine_gram(Z))
    assert np.max(np.abs(K.sum(axis=1))) < 1e-9
    assert np.max(np.abs(K.sum(axis=0))) < 1e-9


def test_rsa_identity_and_affine():
    rng = np.random.default_rng(1)
    Z = rng.standard_normal((6, 3))
    assert math.isclose(rsa(Z, Z), 1.0)
    S = cosine_gram(Z)
    # b = 2a + 3 on dissimilarities means S2 = 1 - (2(1 - S) + 3).
    S2 = 1 - (2 * (1 - S) + 3)
    assert math.isclose(rsa_from_grams(S, S2), 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_rsa_matches_two_pass_pearson(seed):
    rng = np.random.default_rng(seed)
    Z1, Z2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    a, b = rdm_vector(cosine_gram(Z1)).tolist(), rdm_vector(cosine_gram(Z2)).tolist()
    assert abs(rsa(Z1, Z2) - naive_pearson(a, b)) < 1e-12


def test_rdm_vector_order():
    S = np.array([[1, 0.1, 0.2], [0.1, 1, 0.3], [0.2, 0.3, 1]])
    assert np.allclose(rdm_vector(S), [0.9, 0.8, 0.7])


def test_rsa_constant_rdm():
    with pytest.raises(RsaUndefined):
        rsa_from_grams(np.eye(3), np.eye(3) * 0 + np.eye(3))


def test_drift_examples():
    S = np.eye(4)
    assert frob_drift(S, S) == 0.0
    S2 = S.copy()
    S2[0, 1] = S2[1, 0] = 0.3
    assert math.isclose(frob_drift(S, S2), 0.3 * math.sqrt(2))


def test_offdiag_below_frob():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A, B = rng.uniform(-1, 1, (2, 5, 5))
        assert offdiag_drift(A, B) <= frob_drift(A, B) + 1e-15


def test_measured_chains_hold_below_one(rng):
    for _ in range(50):
        Z = rng.standard_normal((8, 4))
        Z2 = Z + 0.1 * rng.standard_normal((8, 4))
        S1, S2 = cosine_gram(Z), cosine_gram(Z2)
        rho, lo = cka_chain(S1, S2)
        r, lo_r = rsa_chain(S1, S2)
        if rho < 1:
            assert cka_from_grams(S1, S2) >= lo - 1e-12
        if r < 1:
            assert rsa_from_grams(S1, S2) >= lo_r - 1e-12


def test_rsa_chain_needs_x_below_one():
    # b = -a flips the correlation to -1, above the bound only because r >= 1.
    S = cosine_gram(np.random.default_rng(2).standard_normal((6, 3)))
    S2 = 2 - S
    np.fill_diagonal(S2, 1.0)
    r, lo = rsa_chain(S, S2)
    assert r >= 1 and math.isclose(rsa_from_grams(S, S2), -1.0) and lo <= 0


def test_relative_weight_gap():
    a = [np.ones((2, 2)), np.ones(2)]
    assert metrics.relative_weight_gap(a, a) == 0.0
    b = [2 * np.ones((2, 2)), np.ones(2)]
    assert math.isclose(metrics.relative_weight_gap(a, b), 2 / 3)


def test_nccc_examples():
    means = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    y = np.arange(3)
    assert nccc_accuracy(means, y, means, y) == 1.0
    rng = np.random.default_rng(0)
    anti = np.array([[1.0, 0.0], [-1.0, 0.0]])
    test = anti[[0, 1, 0, 1]] + 0.01 * rng.standard_normal((4, 2))
    assert nccc_accuracy(anti, [0, 1], test, [0, 1, 0, 1]) == 1.0


def test_nccc_random_labels_near_chance():
    rng = np.random.default_rng(5)
    accs = []
    for _ in range(50):
        Z = rng.standard_normal((200, 8))
        y = np.tile(np.arange(4), 50)
        accs.append(nccc_accuracy(Z[:100], rng.permutation(y[:100]), Z[100:], rng.permutation(y[100:])))
    sigma = math.sqrt(0.25 * 0.75 / 100)
    assert abs(np.mean(accs) - 0.25) < 3 * sigma


def test_nccc_missing_class():
    with pytest.raises(ValueError):
        nccc_accuracy(np.eye(2), [0, 0], np.eye(2), [0, 1])


def test_probe_separable():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.normal(2, 0.3, (20, 2)), rng.normal(-2, 0.3, (20, 2))])
    y = np.repeat([0, 1], 20)
    assert linear_probe_accuracy(X, y, X, y) == 1.0


def test_probe_at_least_nccc_on_separable_family():
    diffs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal((3, 5)) * 2
        y = np.repeat(np.arange(3), 40)
        X = mu[y] + rng.standard_normal((120, 5)) * np.array([3, 0.3, 0.3, 0.3, 0.3])
        tr, te = np.arange(120) % 2 == 0, np.arange(120) % 2 == 1
        diffs.append(
            linear_probe_accuracy(X[tr], y[tr], X[te], y[te], epochs=2000, lr=0.1)
            - nccc_accuracy(X[tr], y[tr], X[te], y[te])
        )
    assert np.median(diffs) >= 0


def test_probe_constant_embeddings():
    X = np.ones((10, 3))
    y = np.array([0] * 7 + [1] * 3)
    assert linear_probe_accuracy(X, y, X, y) == 0.7


def test_probe_diverges_loudly():
    X = np.array([[1e300, 0.0], [-1e300, 0.0]])
    with pytest.raises(metrics.ProbeDiverged):
        linear_probe_accuracy(X, [0, 1], X, [0, 1], epochs=5, lr=1e10)
