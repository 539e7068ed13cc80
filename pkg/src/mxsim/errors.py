"""Exception hierarchy shared by all modules.

Each exception carries a short ``code`` string so callers (and the CLI) can
distinguish failure causes without parsing messages.
"""


class MxError(Exception):
    """Base class for all package errors."""

    code = "error"
    exit_code = 2

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class ValidationError(MxError, ValueError):
    """Invalid argument, shape or configuration."""

    code = "validation"


class TensorFormatError(ValidationError):
    """Malformed MXT1 / packed MX file. ``field`` names the failing header field."""

    def __init__(self, message: str, code: str, field: str | None = None):
        super().__init__(message, code)
        self.field = field


class BundleError(ValidationError):
    code = "bundle"


class PlanError(ValidationError):
    code = "plan"


class InvariantError(MxError):
    """An internal self-check failed (e.g. a sweep argmin mismatch)."""

    code = "invariant"
    exit_code = 3
