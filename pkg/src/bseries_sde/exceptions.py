"""
Error hierarchy shared by the library and the command line.

Library code raises these; only the ``cli`` commands turn them into exit codes.
"""
from typing import Optional

import numpy as np


class BSeriesSDEError(Exception):
    exit_code = 4


class ConfigError(BSeriesSDEError):
    """Invalid configuration or usage; ``key`` names the offending entry."""
    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class SizeLimitError(BSeriesSDEError):
    exit_code = 2


class CapabilityError(BSeriesSDEError):
    exit_code = 2


class InsufficientDataError(BSeriesSDEError):
    exit_code = 2


class AcceptanceError(BSeriesSDEError):
    exit_code = 3


class NonConvergenceError(BSeriesSDEError):
    """
    Fixed-point iteration did not reach the tolerance.

    For batched solves ``failed`` marks the rows that were still moving when
    the iteration budget ran out; ``iterate`` holds the last iterate.
    """
    exit_code = 4

    def __init__(
        self,
        message: str,
        step_size: float = float("nan"),
        iterations: int = 0,
        failed: Optional[np.ndarray] = None,
        iterate: Optional[np.ndarray] = None,
    ):
        super().__init__(message)
        self.step_size = step_size
        self.iterations = iterations
        self.failed = failed
        self.iterate = iterate


class ReferenceAccuracyError(BSeriesSDEError):
    exit_code = 4


class InvalidSampleError(BSeriesSDEError):
    exit_code = 4


class FiniteTimeExplosionError(BSeriesSDEError):
    exit_code = 4
