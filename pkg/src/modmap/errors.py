"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: MissingInputError -> 2,
ValidationError (and subclasses) -> 3, anything else -> 4.
"""


class ModmapError(Exception):
    """Base class for all pipeline errors."""


class MissingInputError(ModmapError):
    """A required input file or record set is absent."""

    def __init__(self, message, missing=None):
        super().__init__(message)
        self.missing = list(missing) if missing is not None else []


class ValidationError(ModmapError):
    """Input data violates a schema or invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending line number."""

    def __init__(self, message, path=None, line=None):
        loc = f"{path}:{line}: " if path is not None and line is not None else ""
        super().__init__(f"{loc}{message}")
        self.path = path
        self.line = line


class LeakageError(ValidationError):
    """Train/val overlap or a fold reading its own model's outputs."""


class ConfigError(ModmapError):
    """Inconsistent or incomplete run configuration."""
