"""
Two-stage streaming detector.

Each metric owns a ``DetectorState``. Within a window every sample is scored
against the predictive computed at the previous window boundary (stage 1);
when the window closes its count vector is scored jointly (stage 2), the
recurrent state advances one step with the realized frequency vector and the
predictive for the next window is computed. The batch detector replays
windows through the same ``stream_step`` so both produce identical records.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from detection.level_sets import CategoricalLevelSet, MIN_MC_SAMPLES, check_epsilon
from detection.scoring import (
    AnomalyScore,
    Regime,
    ScoreRecord,
    Stage,
    asymptotic_score,
    combine,
    point_score,
    window_score,
)
from exceptions import InvalidArgumentError, LateEventError, StateCorruptError
from model.covariates import CovariateSpec
from model.dist import ConcentrationVector
from model.dynamics import HiddenState, ModelParams, step
from model.grid import BinGrid, BinnedObservation
from model.persistence import read_checkpoint, write_checkpoint

STATE_VERSION = 1


class _EndOfWindow:
    def __repr__(self):
        return "END_OF_WINDOW"


END_OF_WINDOW = _EndOfWindow()

StreamEvent = Union[float, _EndOfWindow, BinnedObservation, None]


@dataclass(frozen=True)
class DetectionConfig:
    mode: Regime = Regime.FINITE
    epsilon: float = 0.05
    mc_samples: int = 1000
    window_seconds: float = 3600.0
    reorder_buffer_seconds: float = 0.0
    subwindow_events: int = 0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", Regime.parse(self.mode))
        check_epsilon(self.epsilon)
        if self.mc_samples < MIN_MC_SAMPLES:
            raise InvalidArgumentError(f"mc_samples must be at least {MIN_MC_SAMPLES}", "mc_samples")
        if not self.window_seconds > 0 or self.reorder_buffer_seconds < 0:
            raise InvalidArgumentError("window must be positive and reorder buffer non-negative", "window_seconds")
        if self.subwindow_events < 0:
            raise InvalidArgumentError("subwindow_events must be non-negative", "subwindow_events")


@dataclass(frozen=True)
class MetricModel:
    """Shared read-only model plus the grid of one metric."""

    params: ModelParams
    grid: BinGrid
    covariates: CovariateSpec

    def __post_init__(self):
        if self.grid.bin_count != self.params.dims.bin_count:
            raise InvalidArgumentError("grid bin count does not match the model", "grid")
        if self.covariates.width != self.params.dims.covariate_width:
            raise InvalidArgumentError("covariate spec width does not match the model", "covariates")

    def covariate_row(self, interval_index: int) -> np.ndarray:
        return self.covariates.build([interval_index])[0]


@dataclass
class DetectorState:
    """
    Per-metric detector state. ``alpha`` is the frozen predictive for window
    ``interval_index``; it is ``None`` until a first window has been seen.
    """

    hidden: HiddenState
    epsilon: float
    knots: np.ndarray
    rng: np.random.Generator
    interval_index: Optional[int] = None
    last_z: Optional[np.ndarray] = None
    alpha: Optional[ConcentrationVector] = None
    counts: Optional[np.ndarray] = None
    sub_counts: Optional[np.ndarray] = None
    min_point_log_p: Optional[float] = None
    point_flagged: bool = False
    max_timestamp: float = -math.inf
    pending: Dict[int, List[float]] = field(default_factory=dict)
    _level_set: Optional[CategoricalLevelSet] = field(default=None, repr=False)

    @classmethod
    def initial(cls, model: MetricModel, config: DetectionConfig,
                interval_index: Optional[int] = None) -> "DetectorState":
        d = model.grid.bin_count
        return cls(
            hidden=HiddenState.zeros(model.params.dims),
            epsilon=config.epsilon,
            knots=np.array(model.grid.knots),
            rng=np.random.default_rng(config.seed),
            interval_index=interval_index,
            counts=np.zeros(d, dtype=np.int64),
            sub_counts=np.zeros(d, dtype=np.int64),
        )

    def level_set(self) -> CategoricalLevelSet:
        if self._level_set is None:
            self._level_set = CategoricalLevelSet(self.alpha, self.epsilon)
        return self._level_set

    def check(self, model: MetricModel) -> None:
        """Dimension drift between state and model is a corrupt state."""
        try:
            self.hidden.check(model.params.dims)
        except InvalidArgumentError as e:
            raise StateCorruptError(f"detector state does not fit the model: {e}") from e
        d = model.grid.bin_count
        if self.counts.shape != (d,) or self.sub_counts.shape != (d,):
            raise StateCorruptError("detector window counts do not match the model bin count")
        if self.alpha is not None and self.alpha.dim != d:
            raise StateCorruptError("detector predictive does not match the model bin count")
        if self.knots.shape != model.grid.knots.shape or not np.array_equal(self.knots, model.grid.knots):
            raise StateCorruptError("detector grid differs from the model grid")

    def to_payload(self) -> Dict[str, Any]:
        return {
            "version": STATE_VERSION,
            "hidden": self.hidden.to_dict(),
            "epsilon": self.epsilon,
            "knots": self.knots.tolist(),
            "rng": self.rng.bit_generator.state,
            "interval_index": self.interval_index,
            "last_z": None if self.last_z is None else self.last_z.tolist(),
            "alpha": None if self.alpha is None else self.alpha.alpha.tolist(),
            "counts": self.counts.tolist(),
            "sub_counts": self.sub_counts.tolist(),
            "min_point_log_p": self.min_point_log_p,
            "point_flagged": self.point_flagged,
            "max_timestamp": None if math.isinf(self.max_timestamp) else self.max_timestamp,
            "pending": [[index, values] for index, values in sorted(self.pending.items())],
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> "DetectorState":
        try:
            if payload["version"] != STATE_VERSION:
                raise StateCorruptError(f"unsupported detector state version {payload['version']!r}")
            rng = np.random.default_rng()
            rng.bit_generator.state = payload["rng"]
            max_timestamp = payload["max_timestamp"]
            return cls(
                hidden=HiddenState.from_dict(payload["hidden"]),
                epsilon=float(payload["epsilon"]),
                knots=np.asarray(payload["knots"], dtype=np.float64),
                rng=rng,
                interval_index=payload["interval_index"],
                last_z=None if payload["last_z"] is None else np.asarray(payload["last_z"], dtype=np.float64),
                alpha=None if payload["alpha"] is None else ConcentrationVector(np.asarray(payload["alpha"])),
                counts=np.asarray(payload["counts"], dtype=np.int64),
                sub_counts=np.asarray(payload["sub_counts"], dtype=np.int64),
                min_point_log_p=payload["min_point_log_p"],
                point_flagged=bool(payload["point_flagged"]),
                max_timestamp=-math.inf if max_timestamp is None else float(max_timestamp),
                pending={int(index): [float(v) for v in values] for index, values in payload["pending"]},
            )
        except StateCorruptError:
            raise
        except (KeyError, TypeError, ValueError, InvalidArgumentError) as e:
            raise StateCorruptError(f"detector state payload is invalid: {e}") from e


def _score_sample(state: DetectorState, model: MetricModel, config: DetectionConfig,
                  value: float) -> List[AnomalyScore]:
    if state.interval_index is None:
        raise InvalidArgumentError("detector has no current window; start it at an interval index", "state")
    bin_index = model.grid.bin_index(value)
    state.counts[bin_index] += 1
    scores = []
    if state.alpha is None:
        return scores

    score = point_score(state.alpha, bin_index, state.epsilon, state.interval_index,
                        level_set=state.level_set())
    scores.append(score)
    if state.min_point_log_p is None or score.log_p_point < state.min_point_log_p:
        state.min_point_log_p = score.log_p_point
    state.point_flagged = state.point_flagged or score.is_anomaly

    if config.subwindow_events and config.mode is Regime.FINITE:
        state.sub_counts[bin_index] += 1
        n_sub = int(state.sub_counts.sum())
        if n_sub >= config.subwindow_events:
            scores.append(window_score(state.alpha, state.sub_counts, n_sub, state.epsilon,
                                       config.mc_samples, state.rng, state.interval_index,
                                       stage=Stage.SUBWINDOW))
            state.sub_counts[:] = 0
    return scores


def _advance(state: DetectorState, model: MetricModel, z: Optional[np.ndarray]) -> None:
    """Feed the realized (or repeated, when missing) frequency vector and predict the next window."""
    d = model.grid.bin_count
    if z is not None:
        state.last_z = z
    elif state.last_z is None:
        state.last_z = np.full(d, 1.0 / d)
    next_index = state.interval_index + 1
    state.hidden, state.alpha = step(model.params, state.hidden, state.last_z, model.covariate_row(next_index))
    state.interval_index = next_index
    state.counts = np.zeros(d, dtype=np.int64)
    state.sub_counts = np.zeros(d, dtype=np.int64)
    state.min_point_log_p = None
    state.point_flagged = False
    state._level_set = None


def _close_window(state: DetectorState, model: MetricModel, config: DetectionConfig) -> List[AnomalyScore]:
    if state.interval_index is None:
        return []
    n = int(state.counts.sum())
    scores = []
    if state.alpha is not None and n > 0:
        window = None
        if config.mode is Regime.FINITE:
            window = window_score(state.alpha, state.counts, n, state.epsilon, config.mc_samples,
                                  state.rng, state.interval_index)
            scores.append(window)
        scores.append(combine(state.min_point_log_p, window, state.interval_index, state.point_flagged))
    z = state.counts / float(n) if n > 0 else None
    _advance(state, model, z)
    return scores


def _observe_distribution(state: DetectorState, model: MetricModel, config: DetectionConfig,
                          observation: Optional[BinnedObservation]) -> List[AnomalyScore]:
    if state.interval_index is None:
        raise InvalidArgumentError("detector has no current window; start it at an interval index", "state")
    scores = []
    z = None
    if observation is not None:
        if observation.bin_count != model.grid.bin_count:
            raise InvalidArgumentError("observation bin count does not match the model", "observation")
        z = observation.frequencies()
        if state.alpha is not None:
            if observation.is_asymptotic:
                window = asymptotic_score(state.alpha, observation.probs, state.epsilon,
                                          config.mc_samples, state.rng, state.interval_index)
            else:
                window = window_score(state.alpha, observation.counts, observation.sample_count,
                                      state.epsilon, config.mc_samples, state.rng, state.interval_index)
            scores.extend([window, combine(None, window, state.interval_index)])
    _advance(state, model, z)
    return scores


def stream_step(state: DetectorState, model: MetricModel, config: DetectionConfig,
                event: StreamEvent) -> Tuple[DetectorState, List[AnomalyScore]]:
    """
    Apply one event to ``state`` (mutated in place and returned).

    ``event`` is a raw sample value (stage 1), ``END_OF_WINDOW`` (stage 2 and
    advance), or a whole-interval ``BinnedObservation``/``None`` which scores
    and closes the current window in one go.
    """
    state.check(model)
    if event is END_OF_WINDOW:
        return state, _close_window(state, model, config)
    if event is None or isinstance(event, BinnedObservation):
        return state, _observe_distribution(state, model, config, event)
    return state, _score_sample(state, model, config, float(event))


class StreamingDetector:
    """
    Timestamped event front end for one metric.

    Samples of the current window are scored on arrival; samples of later
    windows wait in ``pending`` until the watermark (latest timestamp minus
    the reorder buffer) has closed every window before theirs.
    """

    def __init__(self, model: MetricModel, config: DetectionConfig, metric_id: str = "metric",
                 state: Optional[DetectorState] = None):
        self.model = model
        self.config = config
        self.metric_id = metric_id
        self.state = state if state is not None else DetectorState.initial(model, config)
        self.state.check(model)
        # input offset of this metric, persisted so a replayed stream can skip what was seen
        self.events_consumed = 0
        self.logger = None

    def set_logger(self, logger):
        """Set logger instance."""
        self.logger = logger

    def window_of(self, timestamp: float) -> int:
        return int(math.floor(timestamp / self.config.window_seconds))

    def _records(self, scores: Iterable[AnomalyScore]) -> List[ScoreRecord]:
        return [ScoreRecord.from_score(self.metric_id, s) for s in scores]

    def _score_values(self, values: Sequence[float]) -> List[AnomalyScore]:
        scores = []
        for value in values:
            scores.extend(stream_step(self.state, self.model, self.config, value)[1])
        return scores

    def _close_through(self, last_closed: int) -> List[AnomalyScore]:
        scores = []
        while self.state.interval_index <= last_closed:
            scores.extend(stream_step(self.state, self.model, self.config, END_OF_WINDOW)[1])
            scores.extend(self._score_values(self.state.pending.pop(self.state.interval_index, [])))
        return scores

    def push(self, timestamp: float, value: float) -> List[ScoreRecord]:
        self.events_consumed += 1
        index = self.window_of(timestamp)
        state = self.state
        if state.interval_index is None:
            state.interval_index = index
        watermark = state.max_timestamp - self.config.reorder_buffer_seconds
        if index < state.interval_index or timestamp < watermark:
            if self.logger:
                self.logger.warning(f"{self.metric_id}: late event at {timestamp} (watermark {watermark})")
            raise LateEventError(f"event at {timestamp} is behind the watermark {watermark}",
                                 event=(timestamp, value), watermark=watermark)

        if index == state.interval_index:
            scores = self._score_values([value])
        else:
            state.pending.setdefault(index, []).append(float(value))
            scores = []
        state.max_timestamp = max(state.max_timestamp, float(timestamp))
        watermark = state.max_timestamp - self.config.reorder_buffer_seconds
        scores.extend(self._close_through(self.window_of(watermark) - 1))
        return self._records(scores)

    def push_observation(self, observation: Optional[BinnedObservation],
                         interval_index: Optional[int] = None) -> List[ScoreRecord]:
        """Whole-interval input (asymptotic mode); ``None`` marks a missing interval."""
        if self.state.interval_index is None:
            if interval_index is None:
                interval_index = observation.interval_index if observation is not None else 0
            self.state.interval_index = interval_index
        return self._records(stream_step(self.state, self.model, self.config, observation)[1])

    def flush(self) -> List[ScoreRecord]:
        """Close every window up to the latest one holding an event."""
        if self.state.interval_index is None:
            return []
        last = max([self.state.interval_index] + list(self.state.pending))
        if self.state.pending or int(self.state.counts.sum()) > 0:
            return self._records(self._close_through(last))
        return []

    def checkpoint(self, path) -> int:
        size = write_checkpoint(path, {"detector": self.state.to_payload(),
                                       "events_consumed": self.events_consumed})
        if self.logger:
            self.logger.debug(f"{self.metric_id}: checkpoint {path} ({size} bytes)")
        return size

    @classmethod
    def restore(cls, path, model: MetricModel, config: DetectionConfig,
                metric_id: str = "metric") -> "StreamingDetector":
        payload = read_checkpoint(path)
        if "detector" not in payload:
            raise StateCorruptError("checkpoint holds no detector state", str(path))
        detector = cls(model, config, metric_id, DetectorState.from_payload(payload["detector"]))
        detector.events_consumed = int(payload.get("events_consumed", 0))
        return detector


def warm_up(model: MetricModel, config: DetectionConfig,
            history: Sequence[Optional[BinnedObservation]], first_index: int = 0) -> DetectorState:
    """Run the recurrent state through the observed ``history``; no scores are kept."""
    state = DetectorState.initial(model, config, interval_index=first_index)
    for observation in history:
        z = None if observation is None else observation.frequencies()
        _advance(state, model, z)
    return state


def detect_windows(model: MetricModel, config: DetectionConfig,
                   windows: Sequence[Tuple[int, Sequence[float]]], metric_id: str = "metric",
                   state: Optional[DetectorState] = None) -> Tuple[DetectorState, List[ScoreRecord]]:
    """
    Batch detector over consecutive ``(interval_index, samples)`` windows.

    ``state`` continues a warmed-up detector; its current window must be the
    first one given.
    """
    if state is None:
        state = DetectorState.initial(model, config, interval_index=windows[0][0] if windows else 0)
    records = []
    for index, samples in windows:
        if index != state.interval_index:
            raise InvalidArgumentError(
                f"window {index} does not follow the detector position {state.interval_index}", "windows"
            )
        scores = []
        for value in samples:
            scores.extend(stream_step(state, model, config, float(value))[1])
        scores.extend(stream_step(state, model, config, END_OF_WINDOW)[1])
        records.extend(ScoreRecord.from_score(metric_id, s) for s in scores)
    return state, records


def detect_observations(model: MetricModel, config: DetectionConfig,
                        observations: Sequence[Optional[BinnedObservation]], metric_id: str = "metric",
                        state: Optional[DetectorState] = None,
                        first_index: int = 0) -> Tuple[DetectorState, List[ScoreRecord]]:
    """Batch detector over whole-interval observations (asymptotic mode or pre-binned counts)."""
    if state is None:
        state = DetectorState.initial(model, config, interval_index=first_index)
    records = []
    for observation in observations:
        scores = stream_step(state, model, config, observation)[1]
        records.extend(ScoreRecord.from_score(metric_id, s) for s in scores)
    return state, records
