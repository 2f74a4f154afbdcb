"""
Configuration management for the distributional anomaly detector.
"""

import json
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Optional, Tuple

from detection.scoring import Regime
from detection.streaming import DetectionConfig
from exceptions import ConfigError, DetectorError
from model.dynamics import TrainingConfig


@dataclass(frozen=True)
class RunConfig:
    """Validated view of the settings used by every command."""

    mode: Regime
    samples_per_interval: int
    grid_kind: str
    bin_count: int
    support: Optional[Tuple[float, float]]
    support_margin: float
    use_age_covariate: bool
    train_fraction: float
    checkpoint_every_windows: int
    max_concurrent_metrics: int
    training: TrainingConfig
    detection: DetectionConfig
    seed: int


class Settings:
    """Application settings: defaults overlaid by a JSON file and command-line overrides."""

    # Default settings
    DEFAULTS = {
        'mode': 'finite',  # asymptotic, finite or single
        'samples_per_interval': 60,
        'grid_kind': 'quantile',  # quantile or regular
        'bin_count': 10,
        'support': None,  # [lo, hi] or None for the widened training range
        'support_margin': 0.05,
        'epsilon': 0.05,
        'mc_samples': 1000,
        'epochs': 100,
        'learning_rate': 1e-3,
        'clip_norm': 10.0,
        'batch_size': 16,
        'batches_per_epoch': 32,
        'context_length': 48,
        'num_layers': 2,
        'hidden_width': 40,
        'alpha_floor': 1e-6,
        'use_age_covariate': True,
        'window_seconds': 3600.0,
        'reorder_buffer_seconds': 0.0,
        'subwindow_events': 0,  # 0 disables the intermediate stage
        'train_fraction': 0.4,
        'checkpoint_every_windows': 1,
        'max_concurrent_metrics': 4,
        'seed': 0,
        'log_level': 'INFO',
        'log_dir': '',
    }

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._settings: Dict[str, Any] = dict(self.DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get a setting value.

        Args:
            key (str): Setting key
            default (Any): Default value if key doesn't exist

        Returns:
            Any: Setting value
        """
        if default is None:
            default = self.DEFAULTS.get(key)
        return self._settings.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """
        Set a setting value, coerced to the type of its default.

        Args:
            key (str): Setting key
            value (Any): Setting value

        Raises:
            ConfigError: If the key is unknown or the value cannot be converted
        """
        if key not in self.DEFAULTS:
            raise ConfigError(f"unknown setting {key!r}", key)
        self._settings[key] = self._coerce(key, value)

    def _coerce(self, key: str, value: Any) -> Any:
        default = self.DEFAULTS[key]
        try:
            if key == 'support':
                return self._parse_support(value)
            if isinstance(default, bool):
                if isinstance(value, str):
                    if value.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                        raise ValueError(value)
                    return value.lower() in ('true', '1', 'yes')
                return bool(value)
            if isinstance(default, int):
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)
                return int(value)
            if isinstance(default, float):
                return float(value)
            return str(value)
        except (TypeError, ValueError):
            raise ConfigError(f"invalid value {value!r} for setting {key!r}", key) from None

    @staticmethod
    def _parse_support(value) -> Optional[Tuple[float, float]]:
        if value is None or value == '' or value == 'auto':
            return None
        if isinstance(value, str):
            value = value.split(',')
        lo, hi = (float(v) for v in value)
        if not lo < hi:
            raise ConfigError(f"support lower bound {lo} must be below upper bound {hi}", 'support')
        return lo, hi

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        """Apply ``key=value`` strings, e.g. from ``--set`` options."""
        for override in overrides:
            key, sep, value = override.partition('=')
            if not sep:
                raise ConfigError(f"override {override!r} is not of the form key=value", override)
            self.set(key.strip(), value.strip())

    def as_dict(self) -> Dict[str, Any]:
        return {key: (list(value) if isinstance(value, tuple) else value)
                for key, value in self._settings.items()}

    def export_settings(self, file_path: str) -> None:
        """
        Export settings to JSON file.

        Args:
            file_path (str): Export file path
        """
        try:
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(self.as_dict(), f, indent=2, sort_keys=True)
        except OSError as e:
            raise ConfigError(f"cannot write settings to {file_path}: {e}") from e

    def import_settings(self, file_path: str) -> None:
        """
        Import settings from JSON file.

        Args:
            file_path (str): Import file path

        Raises:
            ConfigError: If the file cannot be read or holds unknown keys
        """
        try:
            with open(file_path, 'r', encoding='utf-8') as f:
                settings_dict = json.load(f)
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read settings from {file_path}: {e}") from e
        if not isinstance(settings_dict, dict):
            raise ConfigError(f"settings file {file_path} must hold a JSON object")
        for key, value in settings_dict.items():
            self.set(key, value)

    def reset_to_defaults(self) -> None:
        """Reset all settings to default values."""
        self._settings = dict(self.DEFAULTS)

    @classmethod
    def load(cls, file_path: Optional[str] = None, overrides: Iterable[str] = ()) -> "Settings":
        settings = cls()
        if file_path:
            settings.import_settings(file_path)
        settings.apply_overrides(overrides)
        return settings

    def training_config(self) -> TrainingConfig:
        return self._build(TrainingConfig,
                           epochs=self.get('epochs'),
                           learning_rate=self.get('learning_rate'),
                           clip_norm=self.get('clip_norm'),
                           batch_size=self.get('batch_size'),
                           batches_per_epoch=self.get('batches_per_epoch'),
                           context_length=self.get('context_length'),
                           seed=self.get('seed'),
                           num_layers=self.get('num_layers'),
                           hidden_width=self.get('hidden_width'),
                           alpha_floor=self.get('alpha_floor'))

    def detection_config(self) -> DetectionConfig:
        return self._build(DetectionConfig,
                           mode=Regime.parse(self.get('mode')),
                           epsilon=self.get('epsilon'),
                           mc_samples=self.get('mc_samples'),
                           window_seconds=float(self.get('window_seconds')),
                           reorder_buffer_seconds=float(self.get('reorder_buffer_seconds')),
                           subwindow_events=self.get('subwindow_events'),
                           seed=self.get('seed'))

    @staticmethod
    def _build(factory, **kwargs):
        try:
            return factory(**kwargs)
        except ConfigError:
            raise
        except DetectorError as e:
            raise ConfigError(str(e), getattr(e, 'argument', None)) from e

    def run_config(self) -> RunConfig:
        mode = Regime.parse(self.get('mode'))
        grid_kind = self.get('grid_kind')
        if grid_kind not in ('quantile', 'regular'):
            raise ConfigError(f"unknown grid kind {grid_kind!r}", 'grid_kind')
        if self.get('bin_count') < 2:
            raise ConfigError("bin_count must be at least 2", 'bin_count')
        fraction = self.get('train_fraction')
        if not 0.0 < fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)", 'train_fraction')
        samples = 1 if mode is Regime.SINGLE else self.get('samples_per_interval')
        if samples < 1:
            raise ConfigError("samples_per_interval must be positive", 'samples_per_interval')
        if self.get('checkpoint_every_windows') < 0 or self.get('max_concurrent_metrics') < 1:
            raise ConfigError("checkpoint cadence and concurrency must be positive", 'max_concurrent_metrics')
        if self.get('support_margin') < 0:
            raise ConfigError("support_margin must be non-negative", 'support_margin')
        return RunConfig(
            mode=mode,
            samples_per_interval=samples,
            grid_kind=grid_kind,
            bin_count=self.get('bin_count'),
            support=self.get('support'),
            support_margin=self.get('support_margin'),
            use_age_covariate=self.get('use_age_covariate'),
            train_fraction=fraction,
            checkpoint_every_windows=self.get('checkpoint_every_windows'),
            max_concurrent_metrics=self.get('max_concurrent_metrics'),
            training=self.training_config(),
            detection=self.detection_config(),
            seed=self.get('seed'),
        )
