"""
Time covariates fed to the recurrent model alongside the previous observation.
"""

from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional

import numpy as np

from exceptions import InvalidArgumentError

SECONDS_PER_HOUR = 3600.0
HOURS_PER_DAY = 24.0
DAYS_PER_WEEK = 7.0


@dataclass(frozen=True)
class CovariateSpec:
    """
    Hour-of-day and day-of-week (sin, cos) pairs plus an optional linear age
    term standardized with the mean and spread of the training range.
    """

    interval_seconds: float = SECONDS_PER_HOUR
    use_age: bool = True
    age_offset: float = 0.0
    age_scale: float = 1.0

    @property
    def width(self) -> int:
        return 4 + (1 if self.use_age else 0)

    @classmethod
    def fit(cls, train_length: int, interval_seconds: float = SECONDS_PER_HOUR,
            use_age: bool = True, first_index: int = 0) -> "CovariateSpec":
        """Standardize the age term over the training indices ``first_index .. first_index + train_length - 1``."""
        if train_length < 1:
            raise InvalidArgumentError("training range must contain at least one interval", "train_length")
        if not interval_seconds > 0:
            raise InvalidArgumentError("interval duration must be positive", "interval_seconds")
        index = first_index + np.arange(train_length, dtype=np.float64)
        scale = float(index.std()) or 1.0
        return cls(interval_seconds=float(interval_seconds), use_age=use_age,
                   age_offset=float(index.mean()), age_scale=scale)

    def build(self, interval_indices, extra: Optional[np.ndarray] = None) -> np.ndarray:
        """Covariate rows, one per interval index; ``extra`` channels are appended."""
        t = np.asarray(interval_indices, dtype=np.float64)
        hours = t * self.interval_seconds / SECONDS_PER_HOUR
        hour_angle = 2.0 * np.pi * np.mod(hours, HOURS_PER_DAY) / HOURS_PER_DAY
        day_angle = 2.0 * np.pi * np.mod(np.floor(hours / HOURS_PER_DAY), DAYS_PER_WEEK) / DAYS_PER_WEEK
        columns = [np.sin(hour_angle), np.cos(hour_angle), np.sin(day_angle), np.cos(day_angle)]
        if self.use_age:
            columns.append((t - self.age_offset) / self.age_scale)
        features = np.stack(columns, axis=-1)
        if extra is not None:
            extra = np.asarray(extra, dtype=np.float64)
            if extra.shape[0] != features.shape[0]:
                raise InvalidArgumentError("extra covariate channels must have one row per interval", "extra")
            features = np.concatenate([features, extra.reshape(features.shape[0], -1)], axis=-1)
        return features

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CovariateSpec":
        return cls(**data)
