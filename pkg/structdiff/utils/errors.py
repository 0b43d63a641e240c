"""
Error types shared by every structdiff module.

Each error carries an upper-snake ``error_code`` so the CLI can report it in
the same envelope as successful results (see ``responses.py``).
"""

from typing import Any, Dict, Optional


class StructDiffError(Exception):
    """Base error with a machine-readable code and optional details."""

    error_code = "STRUCTDIFF_ERROR"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.error_code, "message": self.message, "details": self.details}


class InvalidRangeError(StructDiffError, ValueError):
    error_code = "INVALID_RANGE"


class DegenerateScheduleError(StructDiffError, ValueError):
    error_code = "DEGENERATE_SCHEDULE"


class ShapeMismatchError(StructDiffError, ValueError):
    error_code = "SHAPE_MISMATCH"


class OrderingError(StructDiffError, ValueError):
    error_code = "ORDERING"


class RenderError(StructDiffError):
    error_code = "RENDER_FAILED"


class SchemaError(StructDiffError, ValueError):
    error_code = "SCHEMA_INVALID"


class ConfigError(StructDiffError, ValueError):
    error_code = "CONFIG_INVALID"


class DegenerateChannelError(StructDiffError, ValueError):
    error_code = "DEGENERATE_CHANNEL"


class NonFiniteLossError(StructDiffError, FloatingPointError):
    error_code = "NON_FINITE_LOSS"


class ResolutionMismatchError(StructDiffError, ValueError):
    error_code = "RESOLUTION_MISMATCH"


class GateFailureError(StructDiffError):
    error_code = "GATE_FAILED"


class UnfittedError(StructDiffError):
    error_code = "UNFITTED"


class OutOfVocabularyError(StructDiffError, ValueError):
    error_code = "OUT_OF_VOCABULARY"


class UnknownModalityError(StructDiffError, KeyError):
    error_code = "UNKNOWN_MODALITY"

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return self.message


class DatasetIOError(StructDiffError, OSError):
    error_code = "DATASET_IO"
