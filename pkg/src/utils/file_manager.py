"""
File manager utility for the distributional anomaly detector.

Reads series, event, label and score files and writes them back; every
parse error names the file and the 1-based line number.
"""

import io
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, TextIO

import numpy as np
import pandas as pd

from detection.scoring import ScoreRecord, Stage
from exceptions import DataError

SCORE_COLUMNS = ["metric_id", "interval_index", "stage", "log_p", "flagged"]
LABEL_VALUES = {"normal": False, "malfunction": True}


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def parse_timestamp(text: str) -> float:
    """Epoch seconds (integer or decimal) or an RFC3339 date-time."""
    text = text.strip()
    try:
        value = float(text)
    except ValueError:
        stamp = pd.Timestamp(text)
        if stamp.tzinfo is None:
            stamp = stamp.tz_localize("UTC")
        return stamp.timestamp()
    if not math.isfinite(value):
        raise ValueError(f"non-finite timestamp {text!r}")
    return value


@dataclass
class SeriesTable:
    """
    Parsed series file: raw samples (``values``) or one quantile vector per
    row (``quantiles`` at ``levels`` k/(K+1)).
    """

    path: str
    timestamps: np.ndarray
    values: Optional[np.ndarray] = None
    levels: Optional[np.ndarray] = None
    quantiles: Optional[np.ndarray] = None

    @property
    def is_quantile(self) -> bool:
        return self.quantiles is not None

    def events(self):
        return zip(self.timestamps.tolist(), self.values.tolist())


@dataclass(frozen=True)
class Event:
    metric_id: str
    timestamp: float
    value: float
    line_number: int


class FileManager:
    """Manages file operations for the detector."""

    def __init__(self):
        self.logger = None  # Will be set by the application

    def set_logger(self, logger):
        """Set logger instance."""
        self.logger = logger

    def _read_table(self, path) -> pd.DataFrame:
        try:
            return pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False)
        except FileNotFoundError:
            raise DataError(f"file not found: {path}", str(path)) from None
        except pd.errors.EmptyDataError:
            raise DataError(f"file is empty: {path}", str(path)) from None
        except (pd.errors.ParserError, UnicodeDecodeError, OSError) as e:
            raise DataError(f"cannot parse {path}: {e}", str(path)) from e

    @staticmethod
    def _to_float(text: str) -> float:
        try:
            return float(text)
        except ValueError:
            return math.nan

    @staticmethod
    def _numeric(column: pd.Series, path, name: str) -> np.ndarray:
        # float() rounds exactly like the event-line parser
        values = column.str.strip().map(FileManager._to_float).to_numpy(dtype=np.float64)
        bad = ~np.isfinite(values)
        if bad.any():
            row = int(np.argmax(bad))
            raise DataError(f"{path}:{row + 2}: invalid {name} {column.iloc[row]!r}", str(path), row + 2)
        return values

    @staticmethod
    def _timestamps(column: pd.Series, path) -> np.ndarray:
        stamps = np.empty(len(column))
        for row, text in enumerate(column):
            try:
                stamps[row] = parse_timestamp(str(text))
            except ValueError:
                raise DataError(f"{path}:{row + 2}: invalid timestamp {text!r}", str(path), row + 2) from None
        return stamps

    def read_series(self, path) -> SeriesTable:
        """
        Read a ``timestamp,value`` or ``timestamp,q1..qK`` series file.

        Args:
            path: Series CSV path

        Returns:
            SeriesTable: Parsed series

        Raises:
            DataError: If the header or any row is malformed
        """
        frame = self._read_table(path)
        columns = [c.strip() for c in frame.columns]
        if not frame.shape[0]:
            raise DataError(f"{path}: no data rows", str(path))
        if columns[0] != "timestamp" or len(columns) < 2:
            raise DataError(f"{path}:1: header must start with 'timestamp'", str(path), 1)
        timestamps = self._timestamps(frame.iloc[:, 0], path)

        if columns[1:] == ["value"]:
            values = self._numeric(frame.iloc[:, 1], path, "value")
            table = SeriesTable(str(path), timestamps, values=values)
        else:
            expected = [f"q{k}" for k in range(1, len(columns))]
            if columns[1:] != expected:
                raise DataError(f"{path}:1: expected columns value or q1..qK", str(path), 1)
            K = len(expected)
            rows = np.column_stack([self._numeric(frame.iloc[:, k], path, f"q{k}") for k in range(1, K + 1)])
            unsorted = np.any(np.diff(rows, axis=1) < 0, axis=1)
            if unsorted.any():
                row = int(np.argmax(unsorted))
                raise DataError(f"{path}:{row + 2}: quantiles must be non-decreasing", str(path), row + 2)
            levels = np.arange(1, K + 1) / (K + 1.0)
            table = SeriesTable(str(path), timestamps, levels=levels, quantiles=rows)

        if self.logger:
            self.logger.debug(f"Read {len(timestamps)} rows from {path}")
        return table

    def parse_event_lines(self, lines: Iterable[str], source: str = "<stdin>") -> Iterator[Event]:
        """Parse ``metric_id,timestamp,value`` lines lazily; blanks and ``#`` comments are skipped."""
        for line_number, line in enumerate(lines, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = [f.strip() for f in text.split(",")]
            if line_number == 1 and fields == ["metric_id", "timestamp", "value"]:
                continue
            if len(fields) != 3 or not fields[0]:
                raise DataError(f"{source}:{line_number}: expected metric_id,timestamp,value", source, line_number)
            try:
                timestamp = parse_timestamp(fields[1])
                value = float(fields[2])
            except ValueError:
                raise DataError(f"{source}:{line_number}: invalid timestamp or value", source, line_number) from None
            if not math.isfinite(value):
                raise DataError(f"{source}:{line_number}: value must be finite", source, line_number)
            yield Event(fields[0], timestamp, value, line_number)

    def read_events(self, path) -> List[Event]:
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return list(self.parse_event_lines(handle, str(path)))
        except OSError as e:
            raise DataError(f"cannot read {path}: {e}", str(path)) from e

    def read_labels(self, path) -> Dict[int, bool]:
        """``interval_index,label`` with label ``normal`` or ``malfunction``."""
        frame = self._read_table(path)
        if [c.strip() for c in frame.columns] != ["interval_index", "label"]:
            raise DataError(f"{path}:1: expected header interval_index,label", str(path), 1)
        indices = self._numeric(frame.iloc[:, 0], path, "interval_index")
        labels = {}
        for row, (index, text) in enumerate(zip(indices, frame.iloc[:, 1])):
            key = text.strip().lower()
            if key not in LABEL_VALUES or index != int(index):
                raise DataError(f"{path}:{row + 2}: invalid label row", str(path), row + 2)
            labels[int(index)] = LABEL_VALUES[key]
        return labels

    def read_flags(self, path, column: str = "statistical") -> Dict[int, bool]:
        frame = self._read_table(path)
        if [c.strip() for c in frame.columns] != ["interval_index", column]:
            raise DataError(f"{path}:1: expected header interval_index,{column}", str(path), 1)
        indices = self._numeric(frame.iloc[:, 0], path, "interval_index")
        flags = self._numeric(frame.iloc[:, 1], path, column)
        return {int(i): bool(f) for i, f in zip(indices, flags)}

    def read_scores(self, path) -> List[ScoreRecord]:
        frame = self._read_table(path)
        if [c.strip() for c in frame.columns] != SCORE_COLUMNS:
            raise DataError(f"{path}:1: expected header {','.join(SCORE_COLUMNS)}", str(path), 1)
        indices = self._numeric(frame["interval_index"], path, "interval_index")
        log_p = frame["log_p"].str.strip().map(self._to_float).to_numpy(dtype=np.float64)
        records = []
        for row in range(frame.shape[0]):
            try:
                stage = Stage(frame["stage"].iloc[row].strip())
                flagged = frame["flagged"].iloc[row].strip()
                if flagged not in ("0", "1") or math.isnan(log_p[row]) or log_p[row] > 0:
                    raise ValueError(flagged)
            except ValueError:
                raise DataError(f"{path}:{row + 2}: invalid score record", str(path), row + 2) from None
            records.append(ScoreRecord(frame["metric_id"].iloc[row].strip(), int(indices[row]), stage,
                                       float(log_p[row]), flagged == "1"))
        return records

    @staticmethod
    def score_header() -> str:
        return ",".join(SCORE_COLUMNS)

    @staticmethod
    def format_score(record: ScoreRecord) -> str:
        return ",".join(record.to_row())

    def write_scores(self, path, records: Sequence[ScoreRecord]) -> None:
        lines = [self.score_header()] + [self.format_score(r) for r in records]
        atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))

    def write_score_stream(self, handle: TextIO, records: Iterable[ScoreRecord]) -> None:
        for record in records:
            handle.write(self.format_score(record) + "\n")
        handle.flush()

    def _write_frame(self, path, frame: pd.DataFrame) -> None:
        buffer = io.StringIO()
        frame.to_csv(buffer, index=False, lineterminator="\n")
        atomic_write(path, buffer.getvalue().encode("utf-8"))
        if self.logger:
            self.logger.debug(f"Wrote {len(frame)} rows to {path}")

    def write_sample_series(self, path, timestamps, values) -> None:
        frame = pd.DataFrame({"timestamp": np.asarray(timestamps, dtype=np.int64),
                              "value": [repr(float(v)) for v in values]})
        self._write_frame(path, frame)

    def write_quantile_series(self, path, timestamps, quantiles) -> None:
        quantiles = np.asarray(quantiles, dtype=np.float64)
        data = {"timestamp": np.asarray(timestamps, dtype=np.int64)}
        for k in range(quantiles.shape[1]):
            data[f"q{k + 1}"] = [repr(float(v)) for v in quantiles[:, k]]
        self._write_frame(path, pd.DataFrame(data))

    def write_events(self, path, metric_id: str, timestamps, values) -> None:
        frame = pd.DataFrame({"metric_id": metric_id,
                              "timestamp": np.asarray(timestamps, dtype=np.int64),
                              "value": [repr(float(v)) for v in values]})
        self._write_frame(path, frame)

    def write_labels(self, path, labels, first_index: int = 0) -> None:
        labels = np.asarray(labels, dtype=bool)
        frame = pd.DataFrame({"interval_index": np.arange(first_index, first_index + labels.size),
                              "label": np.where(labels, "malfunction", "normal")})
        self._write_frame(path, frame)

    def write_flags(self, path, flags, column: str = "statistical", first_index: int = 0) -> None:
        flags = np.asarray(flags, dtype=bool)
        frame = pd.DataFrame({"interval_index": np.arange(first_index, first_index + flags.size),
                              column: flags.astype(int)})
        self._write_frame(path, frame)

    def create_output_directory(self, directory) -> None:
        """
        Create output directory if it doesn't exist.

        Args:
            directory: Directory path

        Raises:
            DataError: If directory cannot be created
        """
        try:
            Path(directory).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create directory: {directory}", str(directory)) from e
