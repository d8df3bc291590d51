"""Representation alignment and downstream metrics."""

from __future__ import annotations

import numpy as np


class CkaUndefined(ValueError):
    pass


class RsaUndefined(ValueError):
    pass


class ProbeDiverged(RuntimeError):
    pass


def cosine_gram(Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    U = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    return U @ U.T


def center(X: np.ndarray) -> np.ndarray:
    """``H X H`` with ``H = I - 11^T/N``."""
    X = np.asarray(X, dtype=np.float64)
    X = X - X.mean(axis=0, keepdims=True)
    return X - X.mean(axis=1, keepdims=True)


def cka_from_grams(S: np.ndarray, S2: np.ndarray) -> float:
    """Linear CKA between two similarity matrices over the same inputs."""
    if S.shape != S2.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {S2.shape}")
    if S.shape[0] < 3:
        raise CkaUndefined("CKA needs at least 3 inputs")
    K, K2 = center(S), center(S2)
    n1, n2 = np.linalg.norm(K), np.linalg.norm(K2)
    if n1 == 0 or n2 == 0:
        raise CkaUndefined("a centered Gram matrix is zero")
    return float(np.sum(K * K2) / (n1 * n2))


def linear_cka(Z: np.ndarray, Z2: np.ndarray) -> float:
    return cka_from_grams(cosine_gram(Z), cosine_gram(Z2))


def rdm_vector(S: np.ndarray) -> np.ndarray:
    """Upper-triangular (``i < j``) entries of ``1 - S``, length ``N(N-1)/2``."""
    iu = np.triu_indices(S.shape[0], k=1)
    return 1.0 - np.asarray(S, dtype=np.float64)[iu]


def rsa_from_grams(S: np.ndarray, S2: np.ndarray) -> float:
    if S.shape != S2.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {S2.shape}")
    a, b = rdm_vector(S), rdm_vector(S2)
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0 or nb == 0:
        raise RsaUndefined("an RDM is constant; Pearson correlation is undefined")
    return float(ac @ bc / (na * nb))


def rsa(Z: np.ndarray, Z2: np.ndarray) -> float:
    return rsa_from_grams(cosine_gram(Z), cosine_gram(Z2))


def frob_drift(S: np.ndarray, S2: np.ndarray) -> float:
    if S.shape != S2.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {S2.shape}")
    return float(np.linalg.norm(S - S2))


def offdiag_drift(S: np.ndarray, S2: np.ndarray) -> float:
    if S.shape != S2.shape:
        raise ValueError(f"shape mismatch {S.shape} vs {S2.shape}")
    D = S - S2
    return float(np.linalg.norm(D - np.diag(np.diag(D))))


def cka_chain(S: np.ndarray, S2: np.ndarray) -> tuple[float, float]:
    """``(rho, (1-rho)/(1+rho))`` from the measured centered-Gram deviation."""
    K, K2 = center(S), center(S2)
    rho = float(np.linalg.norm(K - K2) / np.linalg.norm(K))
    return rho, (1 - rho) / (1 + rho)


def rsa_chain(S: np.ndarray, S2: np.ndarray) -> tuple[float, float]:
    """``(r, (1-r)/(1+r))`` with ``r = ||b - a|| / (sqrt(M) sigma_D)``; population std."""
    a, b = rdm_vector(S), rdm_vector(S2)
    sigma = float(a.std())
    if sigma == 0:
        raise RsaUndefined("reference RDM is constant")
    r = float(np.linalg.norm(b - a) / (np.sqrt(a.size) * sigma))
    return r, (1 - r) / (1 + r)


def relative_weight_gap(layers_a: list[np.ndarray], layers_b: list[np.ndarray]) -> float:
    """Sum over layers of ``||a - b||_F / (0.5 (||a||_F + ||b||_F))``."""
    total = 0.0
    for a, b in zip(layers_a, layers_b, strict=True):
        scale = 0.5 * (np.linalg.norm(a) + np.linalg.norm(b))
        diff = np.linalg.norm(a - b)
        total += 0.0 if diff == 0 else diff / scale
    return float(total)


def _check_classes(train_labels: np.ndarray, test_labels: np.ndarray) -> int:
    C = int(max(train_labels.max(), test_labels.max())) + 1
    missing = sorted(set(range(C)) - set(np.unique(train_labels).tolist()))
    if missing:
        raise ValueError(f"classes missing from the training set: {missing}")
    return C


def nccc_accuracy(train_Z, train_y, test_Z, test_y) -> float:
    """Nearest class-centre accuracy with cosine similarity to renormalised class means."""
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    C = _check_classes(train_y, test_y)
    U = cosine_unit(train_Z)
    means = np.stack([U[train_y == c].mean(axis=0) for c in range(C)])
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = np.divide(means, norms, out=np.zeros_like(means), where=norms > 0)
    pred = np.argmax(cosine_unit(test_Z) @ means.T, axis=1)
    return float(np.mean(pred == test_y))


def cosine_unit(Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    n = np.linalg.norm(Z, axis=1, keepdims=True)
    return np.divide(Z, n, out=np.zeros_like(Z), where=n > 0)


def linear_probe_accuracy(
    train_Z, train_y, test_Z, test_y, epochs: int = 500, lr: float = 0.5, weight_decay: float = 0.0
) -> float:
    """Multinomial logistic regression trained by full-batch gradient descent from zero.

    Deterministic: no random initialisation or shuffling.
    """
    train_y, test_y = np.asarray(train_y), np.asarray(test_y)
    C = _check_classes(train_y, test_y)
    X = np.asarray(train_Z, dtype=np.float64)
    n, d = X.shape
    W = np.zeros((d, C))
    b = np.zeros(C)
    Y = np.eye(C)[train_y]
    for _ in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            logits = X @ W + b
            logits -= logits.max(axis=1, keepdims=True)
            P = np.exp(logits)
            P /= P.sum(axis=1, keepdims=True)
            loss = -np.mean(np.log(np.maximum(P[np.arange(n), train_y], 1e-300)))
        if not np.isfinite(loss):
            raise ProbeDiverged("linear probe loss became non-finite")
        with np.errstate(over="ignore", invalid="ignore"):
            R = (P - Y) / n
            W -= lr * (X.T @ R + weight_decay * W)
            b -= lr * R.sum(axis=0)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ProbeDiverged("linear probe weights became non-finite")
    pred = np.argmax(np.asarray(test_Z, dtype=np.float64) @ W + b, axis=1)
    return float(np.mean(pred == test_y))
