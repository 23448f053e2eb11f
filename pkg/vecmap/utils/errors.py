"""
Error hierarchy for vecmap.

This module provides:
- VecMapError: base class carrying the CLI exit code
- Library errors raised by geometry, matching and the tensor engine
- Pipeline errors mapped to process exit codes (config 2, data 3, numeric 4)
"""

from typing import Optional


class VecMapError(Exception):
    """Base error for all vecmap failures."""

    exit_code: int = 1

    def __init__(self, message: str, *, detail: Optional[dict] = None):
        """
        Initialize error.

        Args:
            message: Human readable description
            detail: Optional structured context for logs
        """
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def to_dict(self) -> dict:
        """Convert to dictionary."""
        return {
            "error": type(self).__name__,
            "message": self.message,
            "detail": self.detail,
        }


class ConfigError(VecMapError, ValueError):
    """Invalid or unreadable configuration."""

    exit_code = 2


class DatasetError(VecMapError):
    """Missing, inconsistent or unreadable dataset content."""

    exit_code = 3


class TrainingError(VecMapError, ArithmeticError):
    """Numeric failure during training (non-finite loss or gradient)."""

    exit_code = 4


class InvalidPolylineError(VecMapError, ValueError):
    """Polyline violates its invariants or is degenerate for the operation."""

    exit_code = 3


class TokenDecodeError(VecMapError, ValueError):
    """Vertex token sequence is malformed."""

    exit_code = 3


class InvalidMatrixError(VecMapError, ValueError):
    """Cost matrix is not square or holds non-finite entries."""

    exit_code = 4


class MatchingError(VecMapError, ValueError):
    """Predictions and targets cannot be matched (repr mismatch, too many targets)."""

    exit_code = 4


class ShapeError(VecMapError, ValueError):
    """Tensor shapes are incompatible for an operation."""

    exit_code = 4
