"""Logit-link GLM for fractional responses, fitted by quasi-binomial IRLS."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class GLMError(ValueError):
    pass


def logit(p):
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise GLMError("logit needs 0 < p < 1")
    out = np.log(arr) - np.log1p(-arr)
    return float(out) if np.ndim(p) == 0 else out


def sigmoid(z):
    """Numerically stable inverse logit; branches on sign to avoid overflow."""
    arr = np.asarray(z, dtype=float)
    out = np.empty_like(arr)
    pos = arr >= 0
    e = np.exp(-np.abs(arr))
    out[pos] = 1.0 / (1.0 + e[pos])
    out[~pos] = e[~pos] / (1.0 + e[~pos])
    # keep the result strictly inside (0, 1)
    out = np.clip(out, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return float(out) if np.ndim(z) == 0 else out


def _design(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim == 1:
        scores = scores[:, None]
    return np.column_stack([np.ones(scores.shape[0]), scores])


def quasi_loglik(beta: np.ndarray, scores: np.ndarray, y: np.ndarray) -> float:
    """Bernoulli log-likelihood evaluated at fractional responses."""
    X = _design(scores)
    eta = X @ np.asarray(beta, dtype=float)
    # log(1 + e^eta) computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def quasi_score(beta: np.ndarray, scores: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of :func:`quasi_loglik` with respect to ``beta``."""
    X = _design(scores)
    mu = sigmoid(X @ np.asarray(beta, dtype=float))
    return X.T @ (np.asarray(y, dtype=float) - mu)


def deviance(y: np.ndarray, mu: np.ndarray) -> float:
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(y > 0, y * np.log(y / mu), 0.0)
        b = np.where(y < 1, (1 - y) * np.log((1 - y) / (1 - mu)), 0.0)
    return float(2.0 * np.sum(a + b))


@dataclass(frozen=True)
class GLMModel:
    beta: np.ndarray  # (k+1,), intercept first
    converged: bool
    iterations: int
    final_deviance: float
    deviance_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.beta.size - 1


def fit_glm(scores: np.ndarray, y_norm: np.ndarray, max_iterations: int = 100,
            beta_tol: float = 1e-8, deviance_tol: float = 1e-10,
            max_halvings: int = 30) -> GLMModel:
    """Fit ``y ~ sigmoid(b0 + scores @ b)`` by iteratively reweighted least squares.

    Each step solves the weighted normal equations with working response
    ``eta + (y - mu) / (mu (1 - mu))`` and weights ``mu (1 - mu)``. A step that
    raises the deviance is halved until it does not.
    """
    X = _design(scores)
    y = np.asarray(y_norm, dtype=float).ravel()
    m, p = X.shape
    if y.size != m:
        raise GLMError("scores and response lengths differ")
    if m <= p:
        raise GLMError(f"need more than {p} rows to fit {p} coefficients, got {m}")
    if np.any(~((y > 0) & (y < 1))):
        raise GLMError("responses must lie strictly inside (0, 1)")

    beta = np.zeros(p)
    mu = sigmoid(X @ beta)
    dev = deviance(y, mu)
    history = [dev]
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        eta = X @ beta
        w = mu * (1.0 - mu)
        z = eta + (y - mu) / w
        XtW = X.T * w
        A = XtW @ X
        b = XtW @ z
        try:
            new_beta = np.linalg.solve(A, b)
            if not np.all(np.isfinite(new_beta)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            log.warning("singular weighted normal equations; adding ridge jitter 1e-10")
            new_beta = np.linalg.solve(A + 1e-10 * np.eye(p), b)

        step = new_beta - beta
        new_mu = sigmoid(X @ new_beta)
        new_dev = deviance(y, new_mu)
        halvings = 0
        while new_dev > dev and halvings < max_halvings:
            step *= 0.5
            new_beta = beta + step
            new_mu = sigmoid(X @ new_beta)
            new_dev = deviance(y, new_mu)
            halvings += 1
        if new_dev > dev:
            # no descent direction left at machine precision
            converged = True
            break
        beta, mu = new_beta, new_mu
        dev_change = abs(dev - new_dev)
        dev = new_dev
        history.append(dev)
        if np.max(np.abs(step)) < beta_tol or dev_change < deviance_tol:
            converged = True
            break
    if not converged:
        log.warning("IRLS did not converge in %d iterations", max_iterations)
    return GLMModel(beta=beta, converged=converged, iterations=it,
                    final_deviance=dev, deviance_history=tuple(history))


def predict_norm(model: GLMModel, score_row: np.ndarray):
    """Predicted normalized response for one score row or a matrix of rows."""
    s = np.asarray(score_row, dtype=float)
    single = s.ndim == 1
    S = s[None, :] if single else s
    if S.shape[1] != model.k:
        raise GLMError(f"expected {model.k} scores, got {S.shape[1]}")
    p = sigmoid(model.beta[0] + S @ model.beta[1:])
    return float(p[0]) if single else p


def r_squared(y, y_hat) -> float:
    """1 - residual sum of squares / total sum of squares (unweighted)."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("need two equal-length sequences of at least 2 values")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        raise ValueError("R^2 is undefined for a constant response")
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot
