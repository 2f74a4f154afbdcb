"""
Custom exceptions for the distributional anomaly detector.
"""

USAGE_EXIT_CODE = 1
DATA_EXIT_CODE = 2


class DetectorError(Exception):
    """Base exception for detector-related errors."""
    def __init__(self, message, error_code=None):
        super().__init__(message)
        self.error_code = error_code
        self.exit_code = DATA_EXIT_CODE


class InvalidArgumentError(DetectorError):
    """Exception raised when an operation receives an invalid argument."""
    def __init__(self, message, argument=None):
        super().__init__(message, "INVALID_ARGUMENT")
        self.argument = argument


class DegenerateGridError(InvalidArgumentError):
    """Exception raised when training data cannot support a quantile grid."""
    def __init__(self, message, distinct_values=None):
        super().__init__(message, "pooled_samples")
        self.error_code = "DEGENERATE_GRID"
        self.distinct_values = distinct_values


class LateEventError(DetectorError):
    """Exception raised when an event arrives behind the reorder buffer."""
    def __init__(self, message, event=None, watermark=None):
        super().__init__(message, "LATE_EVENT")
        self.event = event
        self.watermark = watermark


class TrainingDivergedError(DetectorError):
    """Exception raised when the training loss becomes non-finite."""
    def __init__(self, message, epoch=None):
        super().__init__(message, "TRAINING_DIVERGED")
        self.epoch = epoch


class StateCorruptError(DetectorError):
    """Exception raised when detector state is inconsistent or damaged."""
    def __init__(self, message, path=None):
        super().__init__(message, "STATE_CORRUPT")
        self.path = path


class UndefinedMetricError(DetectorError):
    """Exception raised when an evaluation metric is undefined for the input."""
    def __init__(self, message):
        super().__init__(message, "UNDEFINED_METRIC")


class ConfigError(DetectorError):
    """Exception raised when settings are invalid or inconsistent."""
    def __init__(self, message, setting_key=None):
        super().__init__(message, "CONFIG_ERROR")
        self.setting_key = setting_key
        self.exit_code = USAGE_EXIT_CODE


class DataError(DetectorError):
    """Exception raised when an input file cannot be parsed or joined."""
    def __init__(self, message, path=None, line_number=None):
        super().__init__(message, "DATA_ERROR")
        self.path = path
        self.line_number = line_number


class UsageError(DetectorError):
    """Exception raised for command-line misuse."""
    def __init__(self, message):
        super().__init__(message, "USAGE_ERROR")
        self.exit_code = USAGE_EXIT_CODE
