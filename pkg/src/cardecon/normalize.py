"""Best-fit normal/lognormal CDF normalization onto (0, 1) and its inverse."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import special

NORMAL = "normal"
LOGNORMAL = "lognormal"

# keeps logit(p) finite for values outside the fitted support
QUANTILE_EPS = 1e-6
TIE_TOL = 1e-12

_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


class NormalizationError(ValueError):
    pass


class DegenerateDistributionError(NormalizationError):
    pass


class InsufficientDataError(NormalizationError):
    pass


@dataclass(frozen=True)
class FittedDistribution:
    family: str
    mu: float
    sigma: float
    log_likelihood: float
    n: int

    def __post_init__(self):
        if self.family not in (NORMAL, LOGNORMAL):
            raise ValueError(f"unknown family {self.family!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def logpdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.family == NORMAL:
            z = (x - self.mu) / self.sigma
            return -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI
        with np.errstate(divide="ignore", invalid="ignore"):
            lx = np.log(x)
            z = (lx - self.mu) / self.sigma
            out = -0.5 * z * z - math.log(self.sigma) - _LOG_SQRT_2PI - lx
        return np.where(x > 0, out, -np.inf)

    def pdf(self, x) -> np.ndarray:
        return np.exp(self.logpdf(x))

    def cdf(self, x) -> np.ndarray:
        """Unclamped CDF."""
        x = np.asarray(x, dtype=float)
        if self.family == NORMAL:
            return special.ndtr((x - self.mu) / self.sigma)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (np.log(np.where(x > 0, x, 1.0)) - self.mu) / self.sigma
        return np.where(x > 0, special.ndtr(z), 0.0)

    def ppf(self, p) -> np.ndarray:
        z = special.ndtri(np.asarray(p, dtype=float))
        x = self.mu + self.sigma * z
        return np.exp(x) if self.family == LOGNORMAL else x


def _normal_loglik(x: np.ndarray, mu: float, sigma: float) -> float:
    z = (x - mu) / sigma
    return float(-0.5 * np.dot(z, z) - x.size * (math.log(sigma) + _LOG_SQRT_2PI))


def _check_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 3:
        raise InsufficientDataError(f"need at least 3 samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise NormalizationError("samples must be finite")
    if np.all(x == x[0]):
        raise DegenerateDistributionError("all samples are identical")
    return x


def fit_normal(samples) -> FittedDistribution:
    x = _check_samples(samples)
    mu = float(x.mean())
    sigma = float(np.sqrt(np.mean((x - mu) ** 2)))  # MLE: 1/N variance
    if not sigma > 0:
        raise DegenerateDistributionError("zero variance")
    return FittedDistribution(NORMAL, mu, sigma, _normal_loglik(x, mu, sigma), x.size)


def fit_lognormal(samples) -> FittedDistribution:
    x = _check_samples(samples)
    if np.any(x <= 0):
        raise NormalizationError("lognormal requires strictly positive samples")
    lx = np.log(x)
    mu = float(lx.mean())
    sigma = float(np.sqrt(np.mean((lx - mu) ** 2)))
    if not sigma > 0:
        raise DegenerateDistributionError("zero variance of log-samples")
    ll = _normal_loglik(lx, mu, sigma) - float(lx.sum())
    return FittedDistribution(LOGNORMAL, mu, sigma, ll, x.size)


def fit_distribution(samples) -> FittedDistribution:
    """Maximum-likelihood normal or lognormal, whichever has the larger log-likelihood.

    Lognormal is only a candidate when every sample is positive. Near-ties
    (within 1e-12) go to the normal family.
    """
    normal = fit_normal(samples)
    x = np.asarray(samples, dtype=float)
    if np.any(x <= 0):
        return normal
    try:
        lognormal = fit_lognormal(x)
    except DegenerateDistributionError:
        return normal
    if lognormal.log_likelihood - normal.log_likelihood > TIE_TOL:
        return lognormal
    return normal


def to_quantile(x, d: FittedDistribution, eps: float = QUANTILE_EPS):
    """CDF value of ``x`` under ``d``, clamped to ``[eps, 1 - eps]``."""
    arr = np.asarray(x, dtype=float)
    if d.family == LOGNORMAL and np.any(arr <= 0):
        raise NormalizationError("lognormal quantile needs x > 0")
    p = np.clip(d.cdf(arr), eps, 1.0 - eps)
    return float(p) if np.ndim(x) == 0 else p


def to_quantile_lenient(x, d: FittedDistribution, eps: float = QUANTILE_EPS):
    """Like :func:`to_quantile` but maps nonpositive values under a lognormal to ``eps``."""
    arr = np.asarray(x, dtype=float)
    p = np.clip(d.cdf(arr), eps, 1.0 - eps)
    return float(p) if np.ndim(x) == 0 else p


def from_quantile(p, d: FittedDistribution):
    """Inverse CDF; ``p`` must lie strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~((arr > 0) & (arr < 1))):
        raise NormalizationError("quantile must lie strictly inside (0, 1)")
    x = d.ppf(arr)
    return float(x) if np.ndim(p) == 0 else x


def fit_columns(X: np.ndarray, names: Sequence[str] | None = None) -> list[FittedDistribution]:
    """Fit one distribution per column; errors name the offending column."""
    X = np.asarray(X, dtype=float)
    fits = []
    for j in range(X.shape[1]):
        try:
            fits.append(fit_distribution(X[:, j]))
        except NormalizationError as exc:
            label = names[j] if names is not None else f"column {j}"
            raise type(exc)(f"{label}: {exc}") from exc
    return fits


def normalize_columns(X: np.ndarray, fits: Sequence[FittedDistribution]) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.column_stack([to_quantile_lenient(X[:, j], d) for j, d in enumerate(fits)])
