"""
Synthetic distributional series with injected malfunctions.

Every interval ``t`` has a Gaussian ``F_t`` around a seasonal mean
``sin(2 pi t / period)`` with unit spread; per-interval noise perturbs the
mean (``ds1``) or the spread (``ds2``). Malfunctions only occur after the
learning range.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.stats import norm

from exceptions import ConfigError
from model.grid import (
    BinGrid,
    BinnedObservation,
    bin_samples,
    cdf_from_quantiles,
    cdf_to_probs,
    floored_observation,
    quantile_levels,
)

DYNAMICS = ("ds1", "ds2")
MALFUNCTIONS = ("none", "mu", "sigma", "spike")
CONFIDENCE_Z = 1.96


@dataclass(frozen=True)
class SynthConfig:
    dynamics: str = "ds1"
    malfunction: str = "none"
    period: int = 24
    learn_length: int = 1500
    detect_length: int = 2000
    anomaly_prob: float = 0.03
    samples_per_interval: Optional[int] = 60
    noise_scale: float = 0.1
    mu_shift: float = 1.0
    sigma_drop: float = 0.5
    spike_sigmas: float = 4.0
    quantile_count: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.dynamics not in DYNAMICS:
            raise ConfigError(f"unknown dynamics {self.dynamics!r}", "dynamics")
        if self.malfunction not in MALFUNCTIONS:
            raise ConfigError(f"unknown malfunction {self.malfunction!r}", "malfunction")
        if not 0.0 < self.anomaly_prob < 1.0:
            raise ConfigError("anomaly probability must lie in (0, 1)", "anomaly_prob")
        if self.period < 1 or self.learn_length < 1 or self.detect_length < 1:
            raise ConfigError("period and lengths must be positive", "learn_length")
        if self.samples_per_interval is not None and self.samples_per_interval < 1:
            raise ConfigError("samples per interval must be positive", "samples_per_interval")
        if self.malfunction == "spike" and self.samples_per_interval is None:
            raise ConfigError("spike malfunctions need sampled intervals", "malfunction")
        if not self.noise_scale >= 0 or self.quantile_count < 1:
            raise ConfigError("noise scale must be non-negative and quantile count positive", "noise_scale")

    @property
    def length(self) -> int:
        return self.learn_length + self.detect_length

    @property
    def is_asymptotic(self) -> bool:
        return self.samples_per_interval is None


@dataclass
class LabeledSeries:
    """Generated series with its ground truth; ``samples`` is ``None`` in asymptotic mode."""

    config: SynthConfig
    loc: np.ndarray
    scale: np.ndarray
    noise: np.ndarray
    labels: np.ndarray
    samples: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def length(self) -> int:
        return self.labels.size

    @property
    def learn_length(self) -> int:
        return self.config.learn_length

    def quantile_rows(self, count: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """``(levels, values)``: exact quantiles of every ``F_t`` at levels ``k/(K+1)``."""
        levels = quantile_levels(count or self.config.quantile_count)
        values = norm.ppf(levels[None, :], loc=self.loc[:, None], scale=self.scale[:, None])
        return levels, values

    def observations(self, grid: BinGrid) -> List[BinnedObservation]:
        """Binned intervals; asymptotic intervals are read through their quantile rows."""
        if self.samples is not None:
            return [bin_samples(row, grid, t) for t, row in enumerate(self.samples)]
        levels, values = self.quantile_rows()
        return [floored_observation(cdf_to_probs(cdf_from_quantiles(levels, row, grid)).probs, t)
                for t, row in enumerate(values)]

    def windows(self) -> List[Tuple[int, np.ndarray]]:
        if self.samples is None:
            raise ConfigError("asymptotic series have no raw samples", "samples_per_interval")
        return [(t, row) for t, row in enumerate(self.samples)]

    def training_values(self) -> np.ndarray:
        """Pooled samples (or exact quantiles) of the learning range."""
        T = self.learn_length
        if self.samples is not None:
            return self.samples[:T].ravel()
        return self.quantile_rows()[1][:T].ravel()


def generate(config: SynthConfig) -> LabeledSeries:
    """
    Draw noise, then malfunction positions, then spike signs, then samples,
    all from one generator seeded with ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    L, T = config.length, config.learn_length
    t = np.arange(L)

    noise = rng.normal(0.0, config.noise_scale, size=L)
    uniforms = rng.random(L)
    signs = np.where(rng.random(L) < 0.5, -1.0, 1.0)

    labels = np.zeros(L, dtype=bool)
    if config.malfunction != "none":
        labels = (t >= T) & (uniforms < config.anomaly_prob)

    loc = np.sin(2.0 * np.pi * t / config.period)
    scale = np.ones(L)
    if config.dynamics == "ds1":
        loc = loc + noise
    else:
        scale = scale + noise
    if config.malfunction == "mu":
        loc = np.where(labels, loc + config.mu_shift, loc)
    elif config.malfunction == "sigma":
        scale = np.where(labels, scale - config.sigma_drop, scale)
    if np.any(scale <= 0):
        raise ConfigError("generated standard deviation is not positive", "sigma_drop")

    samples = None
    if config.samples_per_interval is not None:
        samples = rng.normal(loc[:, None], scale[:, None], size=(L, config.samples_per_interval))
        if config.malfunction == "spike":
            samples = samples + (labels * signs * config.spike_sigmas * scale)[:, None]
    return LabeledSeries(config, loc, scale, noise, labels, samples)


def statistical_anomaly_labels(series: LabeledSeries) -> np.ndarray:
    """Normal intervals whose noise term falls outside its own 95% band."""
    band = CONFIDENCE_Z * series.config.noise_scale
    return (np.abs(series.noise) > band) & ~series.labels
