"""
Deco-Mamba Error Types

Every failure the toolkit raises on purpose derives from DecoMambaError so the
command-line layer can turn it into a clean message and an exit code.

Key Features:
- One exception per failure family (configuration, shapes, numerics, ...)
- Structured fields so callers can inspect what went wrong without parsing text
"""

from typing import Dict, Optional, Tuple


class DecoMambaError(Exception):
    """Base class for all deliberate Deco-Mamba failures."""
    exit_code = 1


class ConfigurationError(DecoMambaError):
    """Invalid configuration: bad widths, indivisible sizes, unknown keys, ..."""
    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        self.message = message
        super().__init__(f"{key}: {message}" if key else message)


class ShapeError(DecoMambaError):
    """Array shapes that cannot be combined by an operation."""

    def __init__(self, op_name: str, message: str):
        self.op_name = op_name
        self.message = message
        super().__init__(f"{op_name}: {message}")


class NumericError(DecoMambaError):
    """NaN or Inf produced where finite values were required."""

    def __init__(self, op_name: str, message: str = "non-finite values produced",
                 step: Optional[int] = None):
        self.op_name = op_name
        self.step = step
        self.message = message
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{op_name}: {message}{where}")


class PreconditionError(DecoMambaError):
    """An operation was called outside its documented domain."""

    def __init__(self, op_name: str, message: str):
        self.op_name = op_name
        self.message = message
        super().__init__(f"{op_name}: {message}")


class CheckpointError(DecoMambaError):
    """Unreadable, corrupted or incompatible checkpoint."""
    exit_code = 2

    def __init__(self, message: str, diff: Optional[Dict[str, Tuple[object, object]]] = None):
        self.message = message
        self.diff = diff or {}
        lines = [message]
        for key, (expected, found) in sorted(self.diff.items()):
            lines.append(f"  {key}: checkpoint={found!r} config={expected!r}")
        super().__init__("\n".join(lines))


class DatasetError(DecoMambaError):
    """Missing, empty or malformed dataset directory or image file."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        self.message = message
        super().__init__(f"{message} ({path})" if path else message)
