"""Exception types shared across the package."""


class TwoLevelError(Exception):
    """Base class for all package errors."""


class ShapeError(TwoLevelError, ValueError):
    """Dimension or shape mismatch between operands."""


class ConfigError(TwoLevelError, ValueError):
    """Invalid configuration value or malformed config file."""


class OracleError(TwoLevelError, RuntimeError):
    """A problem oracle (objective, projection, constraint) failed."""

    def __init__(self, message, block=None):
        self.block = block
        if block is not None:
            message = f"block {block}: {message}"
        super().__init__(message)


class InvariantViolation(TwoLevelError, RuntimeError):
    """A solver invariant that must hold by construction was violated.

    Raised instead of silently continuing because a violation signals a
    contract breach in a subsolver, not a numerical tolerance issue.
    """
