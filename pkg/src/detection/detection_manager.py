"""
Detection manager for scoring many metrics with a shared model.
"""

import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from detection.scoring import ScoreRecord
from detection.streaming import (
    DetectionConfig,
    DetectorState,
    MetricModel,
    detect_observations,
    detect_windows,
    warm_up,
)
from exceptions import DetectorError


@dataclass
class MetricJob:
    """
    One metric to score: either raw ``windows`` of samples or whole-interval
    ``observations``; ``history`` warms the recurrent state up first.
    """

    metric_id: str
    model: MetricModel
    windows: Optional[Sequence[Tuple[int, Sequence[float]]]] = None
    observations: Optional[Sequence[Any]] = None
    history: Sequence[Any] = field(default_factory=list)
    first_index: int = 0


@dataclass
class MetricResult:
    metric_id: str
    records: List[ScoreRecord] = field(default_factory=list)
    state: Optional[DetectorState] = None
    error: Optional[DetectorError] = None

    @property
    def success(self) -> bool:
        return self.error is None


class DetectionManager:
    """Manages concurrent scoring of independent metrics."""

    def __init__(self, config: DetectionConfig, max_concurrent: int = 4):
        self.config = config
        self.max_concurrent = max(1, int(max_concurrent))
        self.detecting = False
        self.cancelled = False
        self.completed_count = 0
        self.success_count = 0
        self.total_metrics = 0
        self._lock = threading.Lock()
        self.logger = None

    def set_logger(self, logger):
        """Set logger instance."""
        self.logger = logger

    def run_job(self, job: MetricJob) -> MetricResult:
        """Score a single metric."""
        try:
            state = None
            if job.history:
                state = warm_up(job.model, self.config, job.history, first_index=job.first_index)
            start = job.first_index + len(job.history)
            if job.windows is not None:
                state, records = detect_windows(job.model, self.config, job.windows, job.metric_id, state)
            else:
                state, records = detect_observations(job.model, self.config, job.observations or [],
                                                     job.metric_id, state, first_index=start)
            return MetricResult(job.metric_id, records, state)
        except DetectorError as e:
            if self.logger:
                self.logger.error(f"Error scoring metric {job.metric_id}: {e}")
            return MetricResult(job.metric_id, error=e)
        except Exception as e:
            error = DetectorError(f"metric {job.metric_id} failed with {type(e).__name__}: {e}",
                                  "DETECTION_FAILED")
            error.__cause__ = e
            if self.logger:
                self.logger.error(f"Unexpected error scoring metric {job.metric_id}: {e}")
            return MetricResult(job.metric_id, error=error)

    def detect(self, jobs: Sequence[MetricJob]) -> List[MetricResult]:
        """
        Score every job with at most ``max_concurrent`` worker threads.

        Args:
            jobs (Sequence[MetricJob]): Metrics to score

        Returns:
            List[MetricResult]: One result per job, sorted by metric id
        """
        if self.detecting:
            return []
        if not jobs:
            return []

        self.detecting = True
        self.cancelled = False
        self.completed_count = 0
        self.success_count = 0
        self.total_metrics = len(jobs)
        if self.logger:
            self.logger.info(f"Starting detection on {self.total_metrics} metrics")

        job_queue = queue.Queue()
        for job in jobs:
            job_queue.put(job)
        results: Dict[str, MetricResult] = {}

        def worker_thread():
            while not self.cancelled:
                try:
                    job = job_queue.get_nowait()
                except queue.Empty:
                    break
                result = self.run_job(job)
                with self._lock:
                    results[job.metric_id] = result
                    self.completed_count += 1
                    if result.success:
                        self.success_count += 1
                job_queue.task_done()

        threads = []
        for _ in range(min(self.max_concurrent, len(jobs))):
            thread = threading.Thread(target=worker_thread)
            thread.start()
            threads.append(thread)
        for thread in threads:
            thread.join()

        self.detecting = False
        if self.logger:
            self.logger.info(
                f"Detection completed: {self.success_count}/{self.total_metrics} metrics scored"
            )
        return [results[metric_id] for metric_id in sorted(results)]

    def cancel_detection(self):
        """Stop handing out further metrics."""
        if not self.detecting:
            return
        self.cancelled = True
        if self.logger:
            self.logger.info("Detection cancelled")

    def is_detecting(self) -> bool:
        return self.detecting

    def get_progress(self) -> Dict[str, Any]:
        """Get current detection progress."""
        return {
            'detecting': self.detecting,
            'completed': self.completed_count,
            'total': self.total_metrics,
            'success_count': self.success_count,
            'progress_percentage': (self.completed_count / self.total_metrics * 100) if self.total_metrics > 0 else 0
        }
