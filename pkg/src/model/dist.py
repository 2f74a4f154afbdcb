"""
Dirichlet, Dirichlet-Multinomial and categorical likelihoods on bin grids.

Everything is computed in log space with ``scipy.special.gammaln`` and
``digamma``. The scalar operations are thin wrappers around the batched
kernels (rows = observations) so that a value computed once per call and a
value computed inside a Monte-Carlo batch are bit-identical.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from exceptions import InvalidArgumentError

SIMPLEX_TOLERANCE = 1e-9
ALPHA_FLOOR = 1e-6
_TINY = np.finfo(np.float64).tiny


class LikelihoodKind(Enum):
    DIRICHLET = "dirichlet"
    DIR_MULT = "dir-mult"
    CATEGORICAL = "categorical"


@dataclass(frozen=True, eq=False)
class ConcentrationVector:
    """Strictly positive concentration ``alpha`` with its cached sum."""

    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.ascontiguousarray(self.alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 1:
            raise InvalidArgumentError("alpha must be a non-empty vector", "alpha")
        if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
            raise InvalidArgumentError("alpha components must be finite and > 0", "alpha")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "_alpha0", float(alpha.sum()))

    @property
    def alpha0(self) -> float:
        return self._alpha0

    @property
    def dim(self) -> int:
        return self.alpha.size

    def mean(self) -> np.ndarray:
        return self.alpha / self.alpha0

    @classmethod
    def from_raw(cls, raw, floor: float = ALPHA_FLOOR) -> "ConcentrationVector":
        """Apply the floor used for projection-layer outputs."""
        return cls(np.maximum(np.asarray(raw, dtype=np.float64), floor))


@dataclass(frozen=True)
class LogLikelihood:
    value: float
    kind: LikelihoodKind


AlphaLike = Union[ConcentrationVector, np.ndarray, list, tuple]


def as_concentration(alpha: AlphaLike) -> ConcentrationVector:
    if isinstance(alpha, ConcentrationVector):
        return alpha
    return ConcentrationVector(np.asarray(alpha, dtype=np.float64))


# ---------------------------------------------------------------------------
# Batched kernels: P, M, A have shape (rows, d); n has shape (rows,)
# ---------------------------------------------------------------------------

def dirichlet_logpdf_batch(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Row-wise Dirichlet log density; callers guarantee valid inputs."""
    A0 = A.sum(axis=-1)
    if np.any((P == 0) & (A < 1)):
        raise InvalidArgumentError(
            "zero-probability bin with alpha < 1 has unbounded density", "p"
        )
    return gammaln(A0) - gammaln(A).sum(axis=-1) + xlogy(A - 1.0, P).sum(axis=-1)


def dirmult_logpmf_batch(M: np.ndarray, n: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Row-wise Dirichlet-Multinomial log mass; callers guarantee valid inputs."""
    M = np.asarray(M, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    A0 = A.sum(axis=-1)
    per_bin = gammaln(M + A) - gammaln(M + 1.0) - gammaln(A)
    values = gammaln(n + 1.0) + gammaln(A0) - gammaln(n + A0) + per_bin.sum(axis=-1)

    # n = 1 is the categorical case; use its exact form
    single = n == 1
    if np.any(single):
        hit = np.argmax(M[single], axis=-1)
        rows_alpha = A[single]
        values = np.array(values, dtype=np.float64, copy=True)
        values[single] = np.log(rows_alpha[np.arange(hit.size), hit] / A0[single])
    return values


def dirichlet_grad_batch(P: np.ndarray, A: np.ndarray) -> np.ndarray:
    """d/dalpha of the Dirichlet log density."""
    A0 = A.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        log_p = np.log(P)
    return digamma(A0) - digamma(A) + log_p


def dirmult_grad_batch(M: np.ndarray, n: np.ndarray, A: np.ndarray) -> np.ndarray:
    """d/dalpha of the Dirichlet-Multinomial log mass."""
    M = np.asarray(M, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)[..., None]
    A0 = A.sum(axis=-1, keepdims=True)
    return digamma(A0) - digamma(n + A0) + digamma(M + A) - digamma(A)


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------

def _check_simplex(p, dim: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (dim,):
        raise InvalidArgumentError(f"probability vector must have {dim} components", "p")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise InvalidArgumentError("probability vector must be finite and non-negative", "p")
    total = p.sum()
    if abs(total - 1.0) > SIMPLEX_TOLERANCE:
        raise InvalidArgumentError(f"probability vector sums to {total!r}, not 1", "p")
    return p / total


def _check_counts(m, n: int, dim: int) -> np.ndarray:
    m = np.asarray(m)
    if m.shape != (dim,):
        raise InvalidArgumentError(f"count vector must have {dim} components", "m")
    if np.any(m < 0) or not np.all(m == np.floor(m)):
        raise InvalidArgumentError("counts must be non-negative integers", "m")
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"trial count must be a positive integer, got {n!r}", "n")
    if int(m.sum()) != int(n):
        raise InvalidArgumentError(f"counts sum to {int(m.sum())}, expected {int(n)}", "m")
    return m.astype(np.float64)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

def dirichlet_logpdf(p, alpha: AlphaLike) -> LogLikelihood:
    """``log Dir(p; alpha)``; ``-inf`` when a zero bin meets ``alpha_i > 1``."""
    alpha = as_concentration(alpha)
    p = _check_simplex(p, alpha.dim)
    value = dirichlet_logpdf_batch(p[None, :], alpha.alpha[None, :])[0]
    return LogLikelihood(float(value), LikelihoodKind.DIRICHLET)


def dirmult_logpmf(m, n: int, alpha: AlphaLike) -> LogLikelihood:
    """``log Dir-Mult(m; n, alpha)``."""
    alpha = as_concentration(alpha)
    m = _check_counts(m, n, alpha.dim)
    value = dirmult_logpmf_batch(m[None, :], np.array([n]), alpha.alpha[None, :])[0]
    return LogLikelihood(float(value), LikelihoodKind.DIR_MULT)


def categorical_logpmf(bin_index: int, alpha: AlphaLike) -> LogLikelihood:
    """Single-sample likelihood ``log(alpha_k / alpha_0)``."""
    alpha = as_concentration(alpha)
    if not 0 <= bin_index < alpha.dim:
        raise InvalidArgumentError(f"bin index {bin_index} out of range", "bin_index")
    return LogLikelihood(float(np.log(alpha.alpha[bin_index] / alpha.alpha0)),
                         LikelihoodKind.CATEGORICAL)


def categorical_logpmf_all(alpha: AlphaLike) -> np.ndarray:
    """Log-likelihood of every single-sample outcome, same arithmetic as above."""
    alpha = as_concentration(alpha)
    return np.log(alpha.alpha / alpha.alpha0)


def dirichlet_sample(alpha: AlphaLike, rng: np.random.Generator, size=None) -> np.ndarray:
    """
    Draw from ``Dir(alpha)`` by normalizing Gamma variates.

    Components with ``alpha < 1`` use the boost ``G(a) = G(a + 1) U^(1/a)``
    evaluated in log space so that small concentrations do not underflow.
    """
    alpha = as_concentration(alpha)
    shape = (alpha.dim,) if size is None else (int(size), alpha.dim)
    a = np.broadcast_to(alpha.alpha, shape)
    small = a < 1.0
    log_g = np.log(rng.gamma(np.where(small, a + 1.0, a)))
    if np.any(small):
        log_u = np.log(rng.random(shape))
        log_g = np.where(small, log_g + log_u / a, log_g)
    log_g -= log_g.max(axis=-1, keepdims=True)
    g = np.exp(log_g)
    p = g / g.sum(axis=-1, keepdims=True)
    return np.maximum(p, _TINY)


def dirmult_sample(n: int, alpha: AlphaLike, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw ``p ~ Dir(alpha)`` then ``m ~ Multinomial(n, p)``."""
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"trial count must be a positive integer, got {n!r}", "n")
    p = dirichlet_sample(alpha, rng, size=size)
    p = p / p.sum(axis=-1, keepdims=True)
    return rng.multinomial(int(n), p)


def _dirichlet_gradient(observation, alpha: ConcentrationVector) -> np.ndarray:
    p = _check_simplex(_observation_vector(observation, asymptotic=True), alpha.dim)
    dirichlet_logpdf_batch(p[None, :], alpha.alpha[None, :])
    return dirichlet_grad_batch(p[None, :], alpha.alpha[None, :])[0]


def _dirmult_gradient(observation, alpha: ConcentrationVector) -> np.ndarray:
    m = _observation_vector(observation, asymptotic=False)
    n = int(np.sum(m))
    m = _check_counts(m, n, alpha.dim)
    return dirmult_grad_batch(m[None, :], np.array([n]), alpha.alpha[None, :])[0]


def _observation_vector(observation, asymptotic: bool) -> np.ndarray:
    if hasattr(observation, "is_asymptotic"):
        if observation.is_asymptotic != asymptotic:
            raise InvalidArgumentError("observation regime does not match the likelihood", "observation")
        return observation.probs if asymptotic else observation.counts
    return np.asarray(observation)


_GRADIENTS = {
    dirichlet_logpdf: _dirichlet_gradient,
    dirmult_logpmf: _dirmult_gradient,
    LikelihoodKind.DIRICHLET: _dirichlet_gradient,
    LikelihoodKind.DIR_MULT: _dirmult_gradient,
}


def grad_alpha(logfn, observation, alpha: AlphaLike) -> np.ndarray:
    """
    Analytic gradient of ``logfn(observation, alpha)`` with respect to alpha.

    ``logfn`` is ``dirichlet_logpdf`` or ``dirmult_logpmf`` (or the matching
    ``LikelihoodKind``); ``observation`` is a probability vector, a count
    vector or a ``BinnedObservation``.
    """
    try:
        gradient = _GRADIENTS[logfn]
    except (KeyError, TypeError):
        raise InvalidArgumentError(f"no gradient registered for {logfn!r}", "logfn") from None
    return gradient(observation, as_concentration(alpha))
