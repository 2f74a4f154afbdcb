"""
Logger utility for the distributional anomaly detector.
"""

import logging
import sys
from pathlib import Path
from datetime import datetime
from typing import Optional, Union

DEFAULT_LOGGER_NAME = "dist_anomaly"


def setup_logger(name=DEFAULT_LOGGER_NAME, log_level=logging.INFO,
                 log_dir: Optional[Union[str, Path]] = None):
    """
    Setup logger with console and optional file handlers.

    The console handler writes to stderr so that score records printed on
    stdout stay machine-readable.

    Args:
        name (str): Logger name
        log_level (int | str): Logging level
        log_dir (str | Path | None): Directory for the daily log file

    Returns:
        logging.Logger: Configured logger instance
    """
    if isinstance(log_level, str):
        log_level = logging.getLevelName(log_level.upper())
        if not isinstance(log_level, int):
            log_level = logging.INFO

    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG if log_dir else log_level)

    # Clear existing handlers
    logger.handlers.clear()
    logger.propagate = False

    console_formatter = logging.Formatter('%(levelname)s: %(message)s')
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(log_level)
    console_handler.setFormatter(console_formatter)
    logger.addHandler(console_handler)

    if log_dir:
        logs_dir = Path(log_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)

        timestamp = datetime.now().strftime("%Y%m%d")
        log_file = logs_dir / f"detector_{timestamp}.log"

        file_formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name=DEFAULT_LOGGER_NAME):
    """
    Get existing logger instance.

    Args:
        name (str): Logger name

    Returns:
        logging.Logger: Logger instance
    """
    return logging.getLogger(name)
