"""
Shared fixtures for the us-mae test suite.
"""

import numpy as np
import pytest

from us_mae.model import preset
from us_mae.signal_synth import DatasetSpec, generate_dataset


@pytest.fixture
def rng():
    """Seeded generator for test inputs."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """Smallest preset on the default 512-sample window, dropout off."""
    return preset("T", dropout=0.0)


@pytest.fixture
def short_config():
    """Preset T on a 64-sample window with 8-sample patches (N = 8)."""
    return preset("T", signal_length=64, patch_size=8, dropout=0.0)


@pytest.fixture
def small_spec():
    return DatasetSpec.from_profile("synthetic", count=48, seed=7)


@pytest.fixture
def small_records(small_spec):
    return generate_dataset(small_spec)


@pytest.fixture
def small_signals(small_records):
    """(48, 512) uint8 code matrix."""
    return np.stack([r.samples for r in small_records])


@pytest.fixture
def small_labels(small_records):
    return np.array([r.label for r in small_records], dtype=np.int64)
