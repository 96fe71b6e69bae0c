"""Correlation analysis and principal component analysis."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DecompositionError(ValueError):
    pass


def jacobi_eigh(A: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100
                ) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues sorted
    nonincreasing and eigenvectors as columns.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise DecompositionError("matrix must be square")
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise DecompositionError("matrix must be symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = np.sqrt(np.sum(A * A))
    for sweep in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if scale == 0 or off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                g = 100.0 * abs(apq)
                app, aqq = A[p, p], A[q, q]
                # after a few sweeps, drop entries that no longer affect the diagonal
                if sweep > 3 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    A[p, q] = A[q, p] = 0.0
                    continue
                if apq == 0.0:
                    continue
                h = aqq - app
                if abs(h) + g == abs(h):
                    t = apq / h
                else:
                    theta = 0.5 * h / apq
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        raise DecompositionError("Jacobi iteration did not converge")
    w = np.diag(A).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], V[:, order]


def correlation_matrix(X: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    """Pearson correlations R(i,j) = C(i,j) / sqrt(C(i,i) C(j,j))."""
    X = np.asarray(X, dtype=float)
    m, n = X.shape
    if m < 2:
        raise DecompositionError("need at least 2 rows")
    Xc = X - X.mean(axis=0)
    C = Xc.T @ Xc / (m - 1)
    d = np.diag(C).copy()
    zero = np.flatnonzero(d <= 0)
    if zero.size:
        label = names[zero[0]] if names is not None else f"column {zero[0]}"
        raise DecompositionError(f"{label} has zero variance")
    s = np.sqrt(d)
    R = C / np.outer(s, s)
    R = np.clip(0.5 * (R + R.T), -1.0, 1.0)
    np.fill_diagonal(R, 1.0)
    return R


def cross_correlation(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pearson correlations between each column of ``A`` and each column of ``B``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[0] != B.shape[0]:
        raise DecompositionError("row counts differ")
    R = correlation_matrix(np.column_stack([A, B]))
    return R[: A.shape[1], A.shape[1]:]


@dataclass(frozen=True)
class PCAModel:
    mean: np.ndarray  # (n,)
    components: np.ndarray  # (k_max, n), orthonormal rows
    eigenvalues: np.ndarray  # (k_max,)
    explained_fraction: np.ndarray  # (k_max,)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def cumulative_fraction(self) -> np.ndarray:
        return np.cumsum(self.explained_fraction)


def fit_pca(X: np.ndarray) -> PCAModel:
    """Covariance PCA with a deterministic sign convention.

    Each component is flipped so that its largest-magnitude loading is
    positive (the first such loading on exact ties).
    """
    X = np.asarray(X, dtype=float)
    m, n = X.shape
    if m < 2:
        raise DecompositionError("PCA needs at least 2 rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (m - 1)
    w, V = jacobi_eigh(C)
    w = np.where(w < 0, 0.0, w)  # round-off on rank-deficient covariances
    comps = V.T.copy()
    for i in range(n):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    total = w.sum()
    frac = w / total if total > 0 else np.full(n, 1.0 / n)
    return PCAModel(mean=mean, components=comps, eigenvalues=w, explained_fraction=frac)


def select_components(model: PCAModel, *, variance_threshold: float | None = None,
                      fixed_k: int | None = None) -> int:
    """Number of components: fixed, or the fewest reaching a cumulative variance share."""
    if (variance_threshold is None) == (fixed_k is None):
        raise ValueError("give exactly one of variance_threshold or fixed_k")
    if fixed_k is not None:
        if not 1 <= fixed_k <= model.n_components:
            raise ValueError(f"k must be in 1..{model.n_components}")
        return int(fixed_k)
    if not 0 < variance_threshold <= 1:
        raise ValueError("variance threshold must be in (0, 1]")
    cum = model.cumulative_fraction()
    hit = np.flatnonzero(cum >= variance_threshold - 1e-12)
    return int(hit[0]) + 1 if hit.size else model.n_components


def project(model: PCAModel, X: np.ndarray, k: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != model.mean.size:
        raise DecompositionError(f"expected {model.mean.size} columns, got {X.shape[1]}")
    if not 0 <= k <= model.n_components:
        raise DecompositionError(f"k must be in 0..{model.n_components}")
    return (X - model.mean) @ model.components[:k].T


def reconstruct(model: PCAModel, scores: np.ndarray) -> np.ndarray:
    """Map scores back to the input space (adds the mean)."""
    scores = np.atleast_2d(scores)
    return scores @ model.components[: scores.shape[1]] + model.mean
