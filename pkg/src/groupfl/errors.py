"""Exception types shared across the package."""


class GroupFLError(Exception):
    """Base class for all package errors."""


class ShapeError(GroupFLError, ValueError):
    pass


class DomainError(GroupFLError, ValueError):
    pass


class InvariantError(GroupFLError, ValueError):
    pass


class FormatError(GroupFLError, ValueError):
    """Malformed on-disk data. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(GroupFLError, ValueError):
    pass


class DivergenceError(GroupFLError, ArithmeticError):
    pass


class ConvergenceError(GroupFLError, RuntimeError):
    def __init__(self, message, grad_norm):
        super().__init__(f"{message} (last gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm
