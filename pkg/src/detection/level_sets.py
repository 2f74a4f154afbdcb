"""
Likelihood level sets: the credible region of a predictive distribution is
``{z : L(z) >= eta}`` with ``eta`` the largest threshold whose region still
holds ``1 - epsilon`` of the mass. All likelihoods are handled in log scale.
"""

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from exceptions import InvalidArgumentError
from model.dist import (
    AlphaLike,
    LikelihoodKind,
    as_concentration,
    categorical_logpmf_all,
    dirichlet_logpdf_batch,
    dirichlet_sample,
    dirmult_logpmf_batch,
    dirmult_sample,
)

# log-likelihoods closer than this are one tie class
TIE_TOLERANCE = 1e-9
MASS_TOLERANCE = 1e-9
MIN_MC_SAMPLES = 100


class Method:
    EXACT = "exact"
    MONTE_CARLO = "monte-carlo"


@dataclass(frozen=True)
class LevelSetThreshold:
    """Log-scale threshold ``eta`` at level ``epsilon``."""

    eta: float
    epsilon: float
    method: str = Method.EXACT
    samples: Optional[int] = None
    sample_logliks: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        check_epsilon(self.epsilon)
        if not math.isfinite(self.eta):
            raise InvalidArgumentError("level-set threshold must be finite", "eta")

    @property
    def eta_natural(self) -> float:
        return math.exp(self.eta)

    def flags(self, loglik: float) -> bool:
        """Outside the credible region: strictly below ``eta`` beyond tie tolerance."""
        return loglik < self.eta - TIE_TOLERANCE

    def p_value(self, loglik: float) -> float:
        """Monte-Carlo p-value estimate floored at ``1/(M+1)``."""
        if self.sample_logliks is None:
            raise InvalidArgumentError("p-value estimate needs the sampled likelihoods", "threshold")
        below = np.searchsorted(self.sample_logliks, loglik + TIE_TOLERANCE, side="right")
        return max(below / self.samples, 1.0 / (self.samples + 1))


def check_epsilon(epsilon: float) -> float:
    if not 0.0 < epsilon < 1.0:
        raise InvalidArgumentError(f"epsilon must lie in (0, 1), got {epsilon!r}", "epsilon")
    return float(epsilon)


def tie_classes(sorted_logliks: np.ndarray) -> np.ndarray:
    """Class id per entry of a descending log-likelihood vector."""
    gaps = np.abs(np.diff(sorted_logliks)) > TIE_TOLERANCE
    return np.concatenate([[0], np.cumsum(gaps)])


def exact_eta(logliks, probs, epsilon: float) -> LevelSetThreshold:
    """
    Exact threshold from an enumerated outcome space.

    Tie classes enter the credible region together, so the returned region
    has mass ``>= 1 - epsilon`` and may exceed it when a class straddles the
    boundary.
    """
    epsilon = check_epsilon(epsilon)
    logliks = np.asarray(logliks, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if logliks.size == 0:
        raise InvalidArgumentError("outcome list is empty", "outcomes")
    if logliks.shape != probs.shape:
        raise InvalidArgumentError("need one probability per outcome", "probs")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > MASS_TOLERANCE:
        raise InvalidArgumentError(f"outcome probabilities sum to {probs.sum()!r}, not 1", "probs")

    order = np.argsort(-logliks, kind="stable")
    ranked = logliks[order]
    classes = tie_classes(ranked)
    class_mass = np.bincount(classes, weights=probs[order])
    covered = np.cumsum(class_mass)
    # first class whose inclusion reaches the target mass
    target = 1.0 - epsilon - MASS_TOLERANCE
    first = int(np.argmax(covered >= target))
    eta = float(ranked[np.searchsorted(classes, first, side="right") - 1])
    return LevelSetThreshold(eta=eta, epsilon=epsilon, method=Method.EXACT)


def credible_set(logliks, threshold: LevelSetThreshold) -> np.ndarray:
    """Boolean mask of the outcomes inside the credible region."""
    return np.asarray(logliks, dtype=np.float64) >= threshold.eta - TIE_TOLERANCE


def sample_logliks(predictive: AlphaLike, kind: LikelihoodKind, M: int, rng: np.random.Generator,
                   sample_count: Optional[int] = None) -> np.ndarray:
    """Log-likelihoods of ``M`` outcomes drawn from the predictive, ascending."""
    alpha = as_concentration(predictive)
    A = np.broadcast_to(alpha.alpha, (M, alpha.dim))
    if kind is LikelihoodKind.DIRICHLET:
        values = dirichlet_logpdf_batch(dirichlet_sample(alpha, rng, size=M), A)
    elif kind is LikelihoodKind.DIR_MULT:
        if not sample_count or sample_count < 1:
            raise InvalidArgumentError("Dirichlet-Multinomial sampling needs n >= 1", "sample_count")
        counts = dirmult_sample(sample_count, alpha, rng, size=M)
        values = dirmult_logpmf_batch(counts, np.full(M, sample_count), A)
    else:
        raise InvalidArgumentError(f"no Monte-Carlo sampler for {kind}", "kind")
    return np.sort(values)


def mc_eta(predictive: AlphaLike, kind: LikelihoodKind, epsilon: float, M: int,
           rng: np.random.Generator, sample_count: Optional[int] = None) -> LevelSetThreshold:
    """Lower empirical quantile: the ``ceil(epsilon * M)``-th smallest sampled log-likelihood."""
    epsilon = check_epsilon(epsilon)
    if int(M) != M or M < MIN_MC_SAMPLES:
        raise InvalidArgumentError(f"need at least {MIN_MC_SAMPLES} Monte-Carlo samples, got {M!r}", "M")
    M = int(M)
    values = sample_logliks(predictive, kind, M, rng, sample_count)
    rank = max(1, math.ceil(epsilon * M))
    return LevelSetThreshold(eta=float(values[rank - 1]), epsilon=epsilon, method=Method.MONTE_CARLO,
                             samples=M, sample_logliks=values)


class CategoricalLevelSet:
    """
    Exact level set of the single-sample outcome space (``d`` outcomes with
    mass ``alpha_k / alpha_0``), built once per predictive.
    """

    def __init__(self, predictive: AlphaLike, epsilon: float):
        alpha = as_concentration(predictive)
        self.logliks = categorical_logpmf_all(alpha)
        self.probs = alpha.mean()
        self.threshold = exact_eta(self.logliks, self.probs, epsilon)

    def p_value(self, bin_index: int) -> float:
        if not 0 <= bin_index < self.logliks.size:
            raise InvalidArgumentError(f"bin index {bin_index} out of range", "bin_index")
        at_most = self.logliks <= self.logliks[bin_index] + TIE_TOLERANCE
        return min(float(self.probs[at_most].sum()), 1.0)

    def flags(self, bin_index: int) -> bool:
        """Flagged iff ``p < epsilon``; a p-value equal to ``epsilon`` stays inside."""
        return self.p_value(bin_index) < self.threshold.epsilon - MASS_TOLERANCE


def count_vectors(n: int, d: int) -> Iterator[Tuple[int, ...]]:
    """Every ``d``-bin count vector summing to ``n``."""
    if d == 1:
        yield (n,)
        return
    for first in range(n, -1, -1):
        for rest in count_vectors(n - first, d - 1):
            yield (first,) + rest


def dirmult_outcomes(predictive: AlphaLike, sample_count: int) -> Tuple[np.ndarray, np.ndarray]:
    """Enumerated ``(count_vectors, log_masses)`` of a small Dirichlet-Multinomial."""
    alpha = as_concentration(predictive)
    counts = np.array(list(count_vectors(int(sample_count), alpha.dim)), dtype=np.float64)
    A = np.broadcast_to(alpha.alpha, counts.shape)
    return counts, dirmult_logpmf_batch(counts, np.full(counts.shape[0], sample_count), A)


def coverage(logliks: Sequence[float], probs: Sequence[float], threshold: LevelSetThreshold) -> float:
    """Mass of the flagged outcomes under the enumerated distribution."""
    mask = ~credible_set(logliks, threshold)
    return float(np.asarray(probs, dtype=np.float64)[mask].sum())
