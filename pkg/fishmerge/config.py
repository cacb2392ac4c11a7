"""Shared defaults and environment configuration."""

import os

from .errors import ConfigError

FORMAT_VERSION = 1
REPORT_SCHEMA_VERSION = 1

FISHER_EXAMPLES = 4096
FISHER_SAMPLES = 1
MAX_EXACT_CLASSES = 1024
MERGE_EPSILON = 1e-12
GRID_POINTS = 50
VAL_LIMIT = 2048
CURVE_STEP = 0.1
STSB_BUCKETS = 25

THREADS_ENV = "FISHMERGE_THREADS"


def thread_count() -> int:
    """Worker cap for parallel sections, from FISHMERGE_THREADS if set."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return max(1, min(4, os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value
