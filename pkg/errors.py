"""
BufferGuard error types
Every error carries the exit code the CLI terminates with.
"""

from typing import Optional


class BufferGuardError(Exception):
    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code


class ShapeError(BufferGuardError):
    """Array dimensions do not compose"""


class TrainingError(BufferGuardError):
    """Non-finite gradients or a divergent loss"""


class DegenerateBufferError(BufferGuardError):
    """Buffer spec with y_max <= y_min, ydot_max <= 0 or malformed bounds"""


class UnsupportedArchitectureError(BufferGuardError):
    """Affine-region enforcement needs ReLU hidden layers"""


class NotAffineError(BufferGuardError):
    """Policy is not affine on its region within tolerance"""


class IntegrationError(BufferGuardError):
    """Integrator produced a non-finite state"""


class InvalidStateError(BufferGuardError):
    """State outside the physical domain of the dynamics"""


class DomainError(BufferGuardError):
    """Transformed state outside the invertible domain of T"""


class ConfigError(BufferGuardError):
    exit_code = 2


class IncompatibleCheckpointError(BufferGuardError):
    exit_code = 3
