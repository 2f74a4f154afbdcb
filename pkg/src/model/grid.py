"""
Bin grids, binned observations and piecewise-linear CDFs.

A grid ``a_0 < a_1 < ... < a_d`` partitions the support ``[y_min, y_max]``
into ``d`` half-open bins ``[a_{k-1}, a_k)``; the last bin is closed at
``a_d``. Values outside the support are clamped into the edge bins.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from exceptions import DegenerateGridError, InvalidArgumentError, LateEventError

SIMPLEX_TOLERANCE = 1e-9
# smallest bin mass kept for a directly observed distribution
PROB_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class BinGrid:
    """Strictly increasing knot vector over a bounded support."""

    knots: np.ndarray

    def __post_init__(self):
        knots = np.ascontiguousarray(self.knots, dtype=np.float64)
        if knots.ndim != 1 or knots.size < 3:
            raise InvalidArgumentError("grid needs at least 3 knots (2 bins)", "knots")
        if not np.all(np.isfinite(knots)):
            raise InvalidArgumentError("grid knots must be finite", "knots")
        if not np.all(np.diff(knots) > 0):
            raise InvalidArgumentError("grid knots must be strictly increasing", "knots")
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def bin_count(self) -> int:
        return self.knots.size - 1

    @property
    def y_min(self) -> float:
        return float(self.knots[0])

    @property
    def y_max(self) -> float:
        return float(self.knots[-1])

    def same_as(self, other: "BinGrid") -> bool:
        return np.array_equal(self.knots, other.knots)

    def bin_index(self, value: float) -> int:
        """Bin of a single value under the clamping convention."""
        if not math.isfinite(value):
            raise InvalidArgumentError(f"sample value must be finite, got {value!r}", "value")
        idx = int(np.searchsorted(self.knots, value, side="right")) - 1
        return min(max(idx, 0), self.bin_count - 1)

    def bin_indices(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise InvalidArgumentError("sample values must be finite", "samples")
        idx = np.searchsorted(self.knots, values, side="right") - 1
        return np.clip(idx, 0, self.bin_count - 1)

    def to_list(self) -> List[float]:
        return self.knots.tolist()


@dataclass(frozen=True, eq=False)
class BinnedObservation:
    """
    One aggregation interval on a grid.

    Finite mode carries ``counts`` with ``sample_count = sum(counts)``;
    asymptotic mode carries ``probs`` and ``sample_count is None``.
    """

    interval_index: int
    counts: Optional[np.ndarray] = None
    probs: Optional[np.ndarray] = None
    sample_count: Optional[int] = None

    def __post_init__(self):
        if self.interval_index < 0:
            raise InvalidArgumentError("interval index must be non-negative", "interval_index")
        if (self.counts is None) == (self.probs is None):
            raise InvalidArgumentError("exactly one of counts and probs must be given")

        if self.counts is not None:
            counts = np.asarray(self.counts)
            if counts.ndim != 1 or np.any(counts < 0) or not np.all(counts == np.floor(counts)):
                raise InvalidArgumentError("counts must be a vector of non-negative integers", "counts")
            counts = counts.astype(np.int64)
            total = int(counts.sum())
            if total < 1:
                raise InvalidArgumentError("finite observation needs at least one sample", "counts")
            if self.sample_count is not None and self.sample_count != total:
                raise InvalidArgumentError(
                    f"counts sum to {total} but sample_count is {self.sample_count}", "sample_count"
                )
            counts.setflags(write=False)
            object.__setattr__(self, "counts", counts)
            object.__setattr__(self, "sample_count", total)
        else:
            if self.sample_count is not None:
                raise InvalidArgumentError("asymptotic observation has no sample count", "sample_count")
            probs = np.asarray(self.probs, dtype=np.float64)
            if probs.ndim != 1 or np.any(probs < 0) or not np.all(np.isfinite(probs)):
                raise InvalidArgumentError("probs must be a non-negative finite vector", "probs")
            if abs(probs.sum() - 1.0) > SIMPLEX_TOLERANCE:
                raise InvalidArgumentError(f"probs sum to {probs.sum()!r}, not 1", "probs")
            probs.setflags(write=False)
            object.__setattr__(self, "probs", probs)

    @property
    def is_asymptotic(self) -> bool:
        return self.counts is None

    @property
    def bin_count(self) -> int:
        return (self.probs if self.is_asymptotic else self.counts).size

    def frequencies(self) -> np.ndarray:
        """Normalized frequency vector shared by both regimes."""
        if self.is_asymptotic:
            return np.array(self.probs)
        return self.counts / float(self.sample_count)


@dataclass(frozen=True, eq=False)
class PiecewiseLinearCdf:
    """CDF interpolating ``(a_k, cum[k])``; ``cum[0] = 0`` and ``cum[d] = 1``."""

    grid: BinGrid
    cum: np.ndarray

    def __post_init__(self):
        cum = np.ascontiguousarray(self.cum, dtype=np.float64)
        if cum.shape != self.grid.knots.shape:
            raise InvalidArgumentError("cum must have one value per knot", "cum")
        if cum[0] != 0.0 or cum[-1] != 1.0:
            raise InvalidArgumentError("cum endpoints must be exactly 0 and 1", "cum")
        if np.any(np.diff(cum) < 0) or not np.all(np.isfinite(cum)):
            raise InvalidArgumentError("cum must be monotone non-decreasing", "cum")
        cum.setflags(write=False)
        object.__setattr__(self, "cum", cum)

    def evaluate(self, y) -> np.ndarray:
        return np.interp(y, self.grid.knots, self.cum, left=0.0, right=1.0)

    def density(self) -> np.ndarray:
        """Piecewise-constant density on each bin."""
        return np.diff(self.cum) / np.diff(self.grid.knots)


def make_regular_grid(y_min: float, y_max: float, d: int) -> BinGrid:
    """Uniformly spaced knots ``y_min + k (y_max - y_min) / d``."""
    if not (math.isfinite(y_min) and math.isfinite(y_max)):
        raise InvalidArgumentError("grid bounds must be finite", "support")
    if y_min >= y_max:
        raise InvalidArgumentError(f"y_min ({y_min}) must be below y_max ({y_max})", "support")
    if int(d) != d or d < 2:
        raise InvalidArgumentError(f"bin count must be an integer >= 2, got {d!r}", "d")
    d = int(d)
    knots = y_min + np.arange(d + 1) * (y_max - y_min) / d
    knots[0] = y_min
    knots[-1] = y_max
    return BinGrid(knots)


def default_support(values, margin: float = 0.05) -> Tuple[float, float]:
    """Training extremes widened by ``margin`` of their range on each side."""
    values = np.asarray(values, dtype=np.float64).ravel()
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise InvalidArgumentError("cannot derive a support from no finite values", "values")
    lo, hi = float(values.min()), float(values.max())
    spread = hi - lo
    if spread == 0.0:
        spread = max(abs(lo), 1.0)
    return lo - margin * spread, hi + margin * spread


def make_quantile_grid(pooled_samples, d: int, support: Tuple[float, float]) -> BinGrid:
    """
    Interior knots at the empirical quantiles ``k/d`` of the pooled data.

    Duplicate knots are merged, then midpoints of the widest remaining gaps
    are inserted until the grid has ``d`` bins again.
    """
    if int(d) != d or d < 2:
        raise InvalidArgumentError(f"bin count must be an integer >= 2, got {d!r}", "d")
    d = int(d)
    y_min, y_max = float(support[0]), float(support[1])
    if not (math.isfinite(y_min) and math.isfinite(y_max)) or y_min >= y_max:
        raise InvalidArgumentError(f"invalid support ({y_min}, {y_max})", "support")

    pooled = np.asarray(pooled_samples, dtype=np.float64).ravel()
    pooled = np.clip(pooled[np.isfinite(pooled)], y_min, y_max)
    distinct = np.unique(pooled).size
    if distinct < d + 1:
        raise DegenerateGridError(
            f"quantile grid with {d} bins needs {d + 1} distinct values, got {distinct}",
            distinct_values=distinct,
        )

    interior = np.quantile(pooled, np.arange(1, d) / d)
    knots = np.unique(np.concatenate(([y_min], interior, [y_max])))
    while knots.size < d + 1:
        widest = int(np.argmax(np.diff(knots)))
        midpoint = 0.5 * (knots[widest] + knots[widest + 1])
        knots = np.insert(knots, widest + 1, midpoint)
    return BinGrid(knots)


def pooled_quantile_values(quantile_rows) -> np.ndarray:
    """
    Pool per-interval quantile vectors; their empirical distribution is the
    average of the observed CDFs, which is what the asymptotic quantile grid
    is built from.
    """
    rows = np.asarray(quantile_rows, dtype=np.float64)
    if rows.ndim != 2:
        raise InvalidArgumentError("quantile rows must form a 2-D array", "quantile_rows")
    return rows.ravel()


def make_grid(kind: str, d: int, training_values, support: Optional[Tuple[float, float]] = None,
              margin: float = 0.05) -> BinGrid:
    """Regular or quantile grid; without an explicit support the widened training range is used."""
    if support is None:
        support = default_support(training_values, margin)
    if kind == "regular":
        return make_regular_grid(support[0], support[1], d)
    if kind == "quantile":
        return make_quantile_grid(training_values, d, support)
    raise InvalidArgumentError(f"unknown grid kind {kind!r}", "grid_kind")


def bin_samples(samples, grid: BinGrid, interval_index: int = 0) -> BinnedObservation:
    """Count the samples falling into each bin of ``grid``."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise InvalidArgumentError("cannot bin an empty sample set", "samples")
    counts = np.bincount(grid.bin_indices(samples), minlength=grid.bin_count)
    return BinnedObservation(interval_index=interval_index, counts=counts)


def cdf_to_probs(cdf: PiecewiseLinearCdf, grid: Optional[BinGrid] = None,
                 interval_index: int = 0) -> BinnedObservation:
    """Bin masses ``F(a_k) - F(a_{k-1})`` of a piecewise-linear CDF."""
    if grid is not None and not grid.same_as(cdf.grid):
        raise InvalidArgumentError("CDF is defined on a different grid", "grid")
    probs = np.diff(cdf.cum)
    return BinnedObservation(interval_index=interval_index, probs=probs)


def floored_observation(probs, interval_index: int = 0, floor: float = PROB_FLOOR) -> BinnedObservation:
    """Asymptotic observation with empty bins lifted to ``floor`` and renormalized."""
    probs = np.maximum(np.asarray(probs, dtype=np.float64), floor)
    return BinnedObservation(interval_index=interval_index, probs=probs / probs.sum())


def cdf_from_distribution(grid: BinGrid, cdf_fn: Callable[[np.ndarray], np.ndarray]) -> PiecewiseLinearCdf:
    """Evaluate an analytic CDF at the knots; tail mass folds into the edge bins."""
    cum = np.asarray(cdf_fn(grid.knots), dtype=np.float64).copy()
    cum = np.maximum.accumulate(np.clip(cum, 0.0, 1.0))
    cum[0] = 0.0
    cum[-1] = 1.0
    return PiecewiseLinearCdf(grid, cum)


def quantile_levels(count: int) -> np.ndarray:
    """Levels ``k/(K+1)``, k = 1..K, used for quantile-vector series."""
    return np.arange(1, count + 1) / (count + 1.0)


def cdf_from_quantiles(levels, values, grid: BinGrid) -> PiecewiseLinearCdf:
    """
    Piecewise-linear CDF through ``(y_min, 0)``, the quantile points and
    ``(y_max, 1)``, evaluated at the knots.
    """
    levels = np.asarray(levels, dtype=np.float64)
    values = np.clip(np.asarray(values, dtype=np.float64), grid.y_min, grid.y_max)
    if levels.shape != values.shape or levels.ndim != 1 or levels.size == 0:
        raise InvalidArgumentError("levels and quantile values must be matching vectors", "levels")
    if np.any(np.diff(levels) <= 0) or levels[0] <= 0 or levels[-1] >= 1:
        raise InvalidArgumentError("quantile levels must be strictly increasing inside (0, 1)", "levels")
    if np.any(np.diff(values) < 0):
        raise InvalidArgumentError("quantile values must be non-decreasing", "values")

    xs = np.concatenate(([grid.y_min], values, [grid.y_max]))
    ps = np.concatenate(([0.0], levels, [1.0]))
    cum = np.interp(grid.knots, xs, ps)
    cum = np.maximum.accumulate(cum)
    cum[0] = 0.0
    cum[-1] = 1.0
    return PiecewiseLinearCdf(grid, cum)


@dataclass
class EventAggregator:
    """
    Assigns ``(timestamp, value)`` events to windows ``floor(timestamp / window)``.

    Events may arrive out of order by at most ``reorder_buffer`` seconds; a
    window is emitted once the watermark (largest timestamp seen minus the
    buffer) has passed its end. Events older than the watermark are rejected
    even when their window is still open. Gaps are emitted as empty windows.
    Single-writer: use one instance per metric stream.
    """

    window: float
    reorder_buffer: float = 0.0
    _open: dict = field(default_factory=dict, init=False, repr=False)
    _next_index: Optional[int] = field(default=None, init=False, repr=False)
    _max_timestamp: float = field(default=-math.inf, init=False, repr=False)

    def __post_init__(self):
        if not self.window > 0:
            raise InvalidArgumentError("window duration must be positive", "window")
        if self.reorder_buffer < 0:
            raise InvalidArgumentError("reorder buffer must be non-negative", "reorder_buffer")

    @property
    def watermark(self) -> float:
        return self._max_timestamp - self.reorder_buffer

    def window_of(self, timestamp: float) -> int:
        return int(math.floor(timestamp / self.window))

    def push(self, timestamp: float, value: float) -> List[Tuple[int, np.ndarray]]:
        """Add one event and return the windows it closes."""
        index = self.window_of(timestamp)
        if self._next_index is None:
            self._next_index = index
        if index < self._next_index or timestamp < self.watermark:
            raise LateEventError(
                f"event at {timestamp} is behind the watermark {self.watermark}",
                event=(timestamp, value), watermark=self.watermark,
            )
        self._open.setdefault(index, []).append(float(value))
        self._max_timestamp = max(self._max_timestamp, float(timestamp))
        return self._drain(self.window_of(self.watermark))

    def flush(self) -> List[Tuple[int, np.ndarray]]:
        """Emit every window still open."""
        if not self._open:
            return []
        return self._drain(max(self._open) + 1)

    def _drain(self, first_open: Optional[int]) -> List[Tuple[int, np.ndarray]]:
        closed = []
        if first_open is None or self._next_index is None:
            return closed
        while self._next_index < first_open:
            values = self._open.pop(self._next_index, [])
            closed.append((self._next_index, np.asarray(values, dtype=np.float64)))
            self._next_index += 1
        return closed


def aggregate_events(events: Iterable[Tuple[float, float]], window: float,
                     reorder_buffer: float = 0.0) -> Iterator[Tuple[int, np.ndarray]]:
    """Yield ``(interval_index, samples)`` for consecutive windows of a stream."""
    aggregator = EventAggregator(window=window, reorder_buffer=reorder_buffer)
    for timestamp, value in events:
        yield from aggregator.push(timestamp, value)
    yield from aggregator.flush()


def observations_from_windows(windows: Sequence[Tuple[int, np.ndarray]],
                              grid: BinGrid) -> List[Optional[BinnedObservation]]:
    """Bin each window; empty windows become missing observations (``None``)."""
    return [bin_samples(samples, grid, index) if len(samples) else None
            for index, samples in windows]
