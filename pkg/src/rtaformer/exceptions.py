"""Error types raised across the package.

All of them derive from builtins so callers that don't care about the
distinction can still catch ValueError / RuntimeError.
"""


class ConfigurationError(ValueError):
    """Invalid preset, variant, or module configuration."""


class ShapeError(ValueError):
    """Tensor shape incompatible with a module's contract."""


class ValidationError(ValueError):
    """Input data violates a precondition (non-binary mask, bad size, ...)."""


class IngestionError(RuntimeError):
    """Dataset directory or file cannot be ingested."""
