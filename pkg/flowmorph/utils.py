"""
Utility functions for FlowMorph.

This module contains helpers used throughout the library: logging setup,
operation timing, seeding and worker-count resolution.
"""

import logging
import os
import time
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

import numpy as np

logger = logging.getLogger(__name__)

# third-party loggers that flood DEBUG output while meshes are read and written
QUIET_LOGGERS = ("trimesh",)


class OperationTimer:
    """Wall-clock durations of engine operations (train, interpolate, verify, metrics)."""

    def __init__(self):
        self._durations: Dict[str, float] = {}

    @contextmanager
    def track(self, operation: str, **detail) -> Iterator[None]:
        """Time the block and log it under the operation name; failed runs are not recorded."""
        started = time.perf_counter()
        yield
        duration = time.perf_counter() - started
        self._durations[operation] = duration
        suffix = ", ".join(f"{k}={v}" for k, v in detail.items())
        logger.info(f"{operation} finished in {duration:.2f}s" + (f" ({suffix})" if suffix else ""))

    def durations(self) -> Dict[str, float]:
        return dict(self._durations)


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure the flowmorph loggers for a CLI run.

    Args:
        level (str): Level for flowmorph messages (logging.level)
        log_file (str, optional): Append to this file instead of stderr (logging.log_file)
    """
    numeric_level = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Unknown logging level: {level}")

    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    if log_file:
        logging.basicConfig(level=numeric_level, format=log_format, filename=log_file, filemode='a')
    else:
        logging.basicConfig(level=numeric_level, format=log_format)
    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(numeric_level, logging.WARNING))


def make_rng(seed: Optional[int]) -> np.random.Generator:
    """Seeded numpy generator; every random draw in the package goes through one."""
    return np.random.default_rng(None if seed is None else int(seed))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a seed for a dependent generator."""
    return int(rng.integers(0, 2**31 - 1))


def resolve_threads(threads: Optional[int]) -> int:
    """Worker count for data-parallel loops; None means the hardware count."""
    if threads is None:
        return max(1, os.cpu_count() or 1)
    threads = int(threads)
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    return threads


def format_float(value: float, digits: int = 9) -> str:
    return f"{value:.{digits}g}"
