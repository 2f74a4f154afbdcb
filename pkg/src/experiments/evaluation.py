"""
Detection metrics: ROC-AUC, false-positive rate and recall, and the report
aggregated over repeated runs.
"""

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from detection.scoring import ScoreRecord, Stage
from exceptions import DataError, InvalidArgumentError, UndefinedMetricError


def roc_auc(scores, labels) -> float:
    """
    Probability that a random positive outranks a random negative, ties
    counting one half. Higher scores mean more anomalous.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise InvalidArgumentError("scores and labels must be vectors of equal length", "labels")
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def fpr_recall(flags, labels, exclude=None) -> Tuple[float, Optional[float]]:
    """
    Percent of normal intervals flagged and percent of malfunctions flagged.

    ``exclude`` removes intervals from both rates; recall is ``None`` when no
    malfunction remains.
    """
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if flags.shape != labels.shape:
        raise InvalidArgumentError("flags and labels must have equal length", "flags")
    keep = np.ones_like(labels) if exclude is None else ~np.asarray(exclude, dtype=bool)
    normal = keep & ~labels
    malfunction = keep & labels
    fpr = 100.0 * flags[normal].mean() if normal.any() else 0.0
    recall = 100.0 * flags[malfunction].mean() if malfunction.any() else None
    return float(fpr), (None if recall is None else float(recall))


def interval_scores(records: Iterable[ScoreRecord], stage: Stage = Stage.COMBINED) -> Dict[int, ScoreRecord]:
    """One record per interval for ``stage``; later duplicates are an error."""
    joined = {}
    for record in records:
        if record.stage is not stage:
            continue
        if record.interval_index in joined:
            raise DataError(f"duplicate {stage.value} score for interval {record.interval_index}")
        joined[record.interval_index] = record
    return joined


def align(records: Iterable[ScoreRecord], label_map: Dict[int, bool],
          stage: Stage = Stage.COMBINED) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Join scores with labels on interval index.

    Returns ``(anomaly_scores, flags, labels)`` where the anomaly score is
    ``-log p``. Every labelled interval must have a score.
    """
    scored = interval_scores(records, stage)
    missing = sorted(set(label_map) - set(scored))
    if missing:
        raise DataError(f"{len(missing)} labelled intervals have no score (first: {missing[0]})")
    indices = sorted(label_map)
    scores = np.array([-scored[i].log_p for i in indices])
    flags = np.array([scored[i].flagged for i in indices], dtype=bool)
    labels = np.array([label_map[i] for i in indices], dtype=bool)
    return scores, flags, labels


@dataclass
class SeedResult:
    seed: int
    auc: Optional[float]
    fpr: float
    recall: Optional[float]
    intervals: int = 0
    malfunctions: int = 0


def evaluate_scores(scores, flags, labels, seed: int = 0, exclude=None) -> SeedResult:
    labels = np.asarray(labels, dtype=bool)
    try:
        auc = roc_auc(scores, labels)
    except UndefinedMetricError:
        auc = None
    fpr, recall = fpr_recall(flags, labels, exclude)
    return SeedResult(seed, auc, fpr, recall, int(labels.size), int(labels.sum()))


def _mean_std(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    present = [v for v in values if v is not None]
    if not present:
        return None, None
    return float(np.mean(present)), float(np.std(present))


@dataclass
class EvalReport:
    """Per-seed results and their mean and standard deviation."""

    scenario: str
    per_seed: List[SeedResult] = field(default_factory=list)

    def __post_init__(self):
        self.per_seed = sorted(self.per_seed, key=lambda r: r.seed)

    @property
    def auc(self):
        return _mean_std([r.auc for r in self.per_seed])

    @property
    def fpr_at_eps(self):
        return _mean_std([r.fpr for r in self.per_seed])

    @property
    def recall_at_eps(self):
        return _mean_std([r.recall for r in self.per_seed])

    def to_dict(self):
        def pair(values):
            mean, std = values
            return {"mean": mean, "std": std}

        return {
            "scenario": self.scenario,
            "runs": len(self.per_seed),
            "auc": pair(self.auc),
            "fpr_percent": pair(self.fpr_at_eps),
            "recall_percent": pair(self.recall_at_eps),
            "per_seed": [asdict(r) for r in self.per_seed],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def format_table(self) -> str:
        def cell(values, digits):
            mean, std = values
            if mean is None:
                return "-"
            return f"{mean:.{digits}f} ± {std:.{digits}f}"

        header = f"{'scenario':<20} {'runs':>4} {'AUC':>17} {'FPR %':>15} {'recall %':>15}"
        row = (f"{self.scenario:<20} {len(self.per_seed):>4} {cell(self.auc, 4):>17} "
               f"{cell(self.fpr_at_eps, 2):>15} {cell(self.recall_at_eps, 2):>15}")
        return header + "\n" + row
