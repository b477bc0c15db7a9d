"""Exception hierarchy shared across the package.

Everything raised on purpose derives from ViewselError so callers can catch
one base class. The mixin builtins (ValueError, ArithmeticError, RuntimeError)
keep the types usable in generic code that never imports us.
"""


class ViewselError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ViewselError, ValueError):
    """Array shape or dimensionality mismatch."""


class FormatError(ViewselError, ValueError):
    """Malformed file, header, or serialized payload."""


class ValidationError(ViewselError, ValueError):
    """Input data violates a documented invariant."""


class ConfigError(ViewselError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericError(ViewselError, ArithmeticError):
    """A non-finite value appeared during computation."""


class DeterminismError(ViewselError, RuntimeError):
    """An operation that must be deterministic produced differing results."""
