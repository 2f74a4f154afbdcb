"""
Anomaly scores: ``log p`` where ``p`` is the smallest level at which the
observation would leave the credible region.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from detection.level_sets import CategoricalLevelSet, mc_eta
from exceptions import ConfigError
from model.dist import AlphaLike, LikelihoodKind, as_concentration, dirichlet_logpdf, dirmult_logpmf


class Regime(Enum):
    ASYMPTOTIC = "asymptotic"
    FINITE = "finite"
    SINGLE = "single"

    @classmethod
    def parse(cls, value) -> "Regime":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown mode {value!r}; expected asymptotic, finite or single", "mode") from None


class Stage(Enum):
    POINT = "point"
    SUBWINDOW = "subwindow"
    WINDOW = "window"
    COMBINED = "combined"


@dataclass(frozen=True)
class AnomalyScore:
    """Score of one stage; ``combined`` adds whichever stage components are present."""

    stage: Stage
    interval_index: int
    log_p_point: Optional[float] = None
    log_p_window: Optional[float] = None
    is_anomaly: bool = False

    @property
    def combined(self) -> float:
        return sum(v for v in (self.log_p_point, self.log_p_window) if v is not None)

    @property
    def log_p(self) -> float:
        if self.stage is Stage.POINT:
            return self.log_p_point
        if self.stage is Stage.COMBINED:
            return self.combined
        return self.log_p_window


@dataclass(frozen=True)
class ScoreRecord:
    """One output line ``metric_id,interval_index,stage,log_p,flagged``."""

    metric_id: str
    interval_index: int
    stage: Stage
    log_p: float
    flagged: bool

    @classmethod
    def from_score(cls, metric_id: str, score: AnomalyScore) -> "ScoreRecord":
        return cls(metric_id, score.interval_index, score.stage, float(score.log_p), bool(score.is_anomaly))

    def to_row(self):
        return [self.metric_id, str(self.interval_index), self.stage.value, repr(self.log_p),
                "1" if self.flagged else "0"]


def point_score(predictive: AlphaLike, sample_bin: int, epsilon: float = 0.05,
                interval_index: int = 0, level_set: Optional[CategoricalLevelSet] = None) -> AnomalyScore:
    """Stage 1: exact single-sample score against the categorical outcome space."""
    if level_set is None:
        level_set = CategoricalLevelSet(predictive, epsilon)
    p = level_set.p_value(sample_bin)
    return AnomalyScore(Stage.POINT, interval_index, log_p_point=math.log(p),
                        is_anomaly=level_set.flags(sample_bin))


def window_score(predictive: AlphaLike, m, n: int, epsilon: float, M: int, rng: np.random.Generator,
                 interval_index: int = 0, stage: Stage = Stage.WINDOW) -> AnomalyScore:
    """Stage 2: Monte-Carlo score of a window's count vector under Dir-Mult(n, alpha)."""
    alpha = as_concentration(predictive)
    observed = dirmult_logpmf(m, n, alpha).value
    threshold = mc_eta(alpha, LikelihoodKind.DIR_MULT, epsilon, M, rng, sample_count=n)
    return AnomalyScore(stage, interval_index, log_p_window=math.log(threshold.p_value(observed)),
                        is_anomaly=threshold.flags(observed))


def asymptotic_score(predictive: AlphaLike, p_obs, epsilon: float, M: int, rng: np.random.Generator,
                     interval_index: int = 0) -> AnomalyScore:
    """Monte-Carlo score of an observed bin-probability vector under Dir(alpha)."""
    alpha = as_concentration(predictive)
    observed = dirichlet_logpdf(p_obs, alpha).value
    threshold = mc_eta(alpha, LikelihoodKind.DIRICHLET, epsilon, M, rng)
    return AnomalyScore(Stage.WINDOW, interval_index, log_p_window=math.log(threshold.p_value(observed)),
                        is_anomaly=threshold.flags(observed))


def combine(point_log_p: Optional[float], window: Optional[AnomalyScore], interval_index: int,
            point_flagged: bool = False) -> AnomalyScore:
    """
    Window-close record: the window's lowest point score plus the collective score.

    The flag follows the collective stage when present, else the point stage.
    """
    if window is not None:
        return AnomalyScore(Stage.COMBINED, interval_index, log_p_point=point_log_p,
                            log_p_window=window.log_p_window, is_anomaly=window.is_anomaly)
    return AnomalyScore(Stage.COMBINED, interval_index, log_p_point=point_log_p, is_anomaly=point_flagged)
