"""
Test configuration and fixtures for the distributional anomaly detector tests.
"""

import os
import sys
import tempfile
from unittest.mock import Mock

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from config.settings import Settings
from model.dynamics import ModelDims, ModelParams
from model.grid import make_regular_grid


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    temp_path = tempfile.mkdtemp()
    yield temp_path
    # Cleanup
    import shutil
    shutil.rmtree(temp_path, ignore_errors=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    """Four regular bins over [-2, 2]."""
    return make_regular_grid(-2.0, 2.0, 4)


@pytest.fixture
def tiny_params():
    """Randomly initialized 2-layer model with 3 hidden units over 4 bins."""
    dims = ModelDims(bin_count=4, covariate_width=5, hidden_width=3, num_layers=2)
    return ModelParams.initialize(dims, np.random.default_rng(7))


@pytest.fixture
def settings():
    """Settings small enough for fast end-to-end runs."""
    return Settings({
        'epochs': 2,
        'hidden_width': 4,
        'num_layers': 1,
        'context_length': 8,
        'batch_size': 4,
        'batches_per_epoch': 4,
        'mc_samples': 200,
        'max_concurrent_metrics': 2,
    })


@pytest.fixture
def mock_logger():
    """Create a mock logger."""
    logger = Mock()
    logger.info = Mock()
    logger.error = Mock()
    logger.warning = Mock()
    logger.debug = Mock()
    logger.log = Mock()
    return logger
