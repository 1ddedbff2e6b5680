"""
Error Handling - Exception hierarchy shared by every SPRINT package
"""

from typing import Any, Dict, Optional


class SprintError(Exception):
    """Base class for all errors raised by this project"""


class DimensionError(SprintError, ValueError):
    """Image, grid or head dimensions that do not divide as required"""


class ShapeMismatchError(SprintError, ValueError):
    """Operand shapes, lengths or channel counts that do not agree"""


class MaskError(SprintError, ValueError):
    """Invalid drop-mask parameters or a mask applied to the wrong grid"""


class ConfigError(SprintError, ValueError):
    """Invalid or unknown configuration keys"""


class PhaseError(SprintError, RuntimeError):
    """A training step called while the state is in another phase"""


class MissingGradientError(SprintError, KeyError):
    """Gradient norm requested for parameters that hold no gradient"""


class LabelError(SprintError, ValueError):
    """Class labels outside the conditioning vocabulary"""


class CheckpointError(SprintError, IOError):
    """Malformed checkpoint or sample-array file"""


class NonFiniteLossError(SprintError, FloatingPointError):
    """
    Raised when a training step produces a NaN or infinite loss.

    Args:
        iteration: Global iteration at which the step aborted
        diagnostics: JSON-serializable snapshot of the step inputs
    """

    def __init__(self, iteration: int, diagnostics: Optional[Dict[str, Any]] = None):
        self.iteration = iteration
        self.diagnostics = diagnostics or {}
        super().__init__(f"non-finite loss at iteration {iteration}")
