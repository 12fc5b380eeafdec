"""Exception hierarchy for the brownout MoE simulator.

Every domain error carries a human-readable message plus a ``details`` dict
that the CLI renders as JSON. Concrete errors also inherit the builtin they
specialise, so callers may catch ``ValueError`` / ``RuntimeError`` as usual.
"""

import logging
import sys
from typing import Any, Dict, Optional

# Configure logging to stderr only (never stdout - corrupts JSON/CSV command output)
logging.basicConfig(stream=sys.stderr, level=logging.INFO)
logger = logging.getLogger("brownout-moe.errors")


class BrownoutError(Exception):
    """Base exception for simulator, router and training errors."""

    def __init__(self, message: str, component: str, details: Optional[Dict[str, Any]] = None):
        """Initialize domain error.

        Args:
            message: Error message
            component: Name of the component that raised the error
            details: Additional error details
        """
        super().__init__(message)
        self.message = message
        self.component = component
        self.details = details or {}
        logger.error(f"Error in {component}: {message}")


class ShapeError(BrownoutError, ValueError):
    """Vector or matrix dimensions do not agree."""


class ParameterError(BrownoutError, ValueError):
    """A numeric parameter is outside its allowed range."""


class ConsistencyError(BrownoutError, ValueError):
    """Two inputs that must describe the same thing disagree (e.g. plan vs batch)."""


class OrderingError(BrownoutError, ValueError):
    """A time-ordered sequence went backwards."""


class SaturationError(BrownoutError, ValueError):
    """A queueing model was queried at or beyond its stability limit."""


class TraceFormatError(BrownoutError, ValueError):
    """A CSV trace or record file contains malformed rows."""

    def __init__(self, message: str, line_numbers: list[int], details: Optional[Dict[str, Any]] = None):
        merged = dict(details or {})
        merged["line_numbers"] = line_numbers
        super().__init__(message, "trace_io", merged)
        self.line_numbers = line_numbers


class TrainingError(BrownoutError, RuntimeError):
    """United-expert distillation diverged or could not start."""
