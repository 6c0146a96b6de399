"""
Configuration helpers: key=value config files, environment defaults and
seeded random substreams.
"""

import logging
import os
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import DataIOError, UsageError

logger = logging.getLogger(__name__)

# Environment
ENV_WORKERS = "US_MAE_WORKERS"
ENV_LOG_LEVEL = "US_MAE_LOG_LEVEL"

# Substream tags for derive_rng; the first spawn key selects the purpose
STREAM_RECORD = 0
STREAM_MASK = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3
STREAM_INIT = 4
STREAM_VAL_MASK = 5
STREAM_SUBSAMPLE = 6
STREAM_RECONSTRUCT = 7

TRUE_VALUES = {"1", "true", "yes", "on"}
FALSE_VALUES = {"0", "false", "no", "off", ""}


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Build an independent counter-based generator for (seed, keys).

    The same (seed, keys) always yields the same stream, no matter how many
    other streams were drawn before or in which thread, which keeps parallel
    generation and batch assembly deterministic.

    Args:
        seed: Non-negative base seed
        keys: Non-negative integers naming the substream (purpose tag, index, ...)

    Returns:
        np.random.Generator backed by Philox
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise UsageError(f"Seeds and stream keys must be non-negative, got {seed}, {keys}")
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def default_workers() -> int:
    """Worker count for parallel dataset generation (US_MAE_WORKERS, default 1)."""
    raw = os.environ.get(ENV_WORKERS, "1")
    try:
        workers = int(raw)
    except ValueError:
        raise UsageError(f"{ENV_WORKERS} must be an integer, got {raw!r}")
    if workers < 1:
        raise UsageError(f"{ENV_WORKERS} must be >= 1, got {workers}")
    return workers


def default_log_level() -> str:
    return os.environ.get(ENV_LOG_LEVEL, "INFO").upper()


def normalize_key(key: str) -> str:
    """Map '--freq-min', 'freq-min' and 'freq_min' to the argparse dest 'freq_min'."""
    return key.strip().lstrip("-").replace("-", "_")


def parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise UsageError(f"Expected a boolean value, got {value!r}")


def load_config_file(path: str) -> Dict[str, str]:
    """
    Read a UTF-8 key=value config file.

    Blank lines and lines starting with '#' are ignored. Keys are normalized
    to argparse destination names; values stay strings so argparse applies
    each flag's own type conversion.

    Args:
        path: Config file path

    Returns:
        Dict of dest name -> raw string value

    Raises:
        DataIOError: If the file cannot be read
        UsageError: If a line is not of the form key = value
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataIOError(f"Cannot read config file {path}: {e}") from e

    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = stripped.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        values[key] = value.strip()

    logger.debug("Loaded %d settings from %s", len(values), path)
    return values
