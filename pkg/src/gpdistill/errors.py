"""Typed error taxonomy shared by every gpdistill module.

All errors raised on purpose derive from :class:`GpdistillError`, so callers
(and the CLI) can distinguish diagnosed failures from genuine bugs.
"""


class GpdistillError(Exception):
    """Base class for all errors raised deliberately by gpdistill."""


class ShapeError(GpdistillError, ValueError):
    """An array has the wrong rank, size, or an inconsistent partner shape."""


class ParameterError(GpdistillError, ValueError):
    """A scalar argument or configuration value is out of its legal range."""


class DegenerateInputError(GpdistillError, ValueError):
    """Input is structurally valid but degenerate (zero variance, zero norm)."""


class NumericalError(GpdistillError, ArithmeticError):
    """A numeric routine failed: non-finite values, no convergence, singularity."""


class StateError(GpdistillError, RuntimeError):
    """A stateful object is internally inconsistent (e.g. audit checksum drift)."""


class CapabilityError(GpdistillError, RuntimeError):
    """The requested output is undefined for this architecture/configuration."""


class FormatError(GpdistillError, ValueError):
    """A serialized payload (IDX file, checkpoint, report) is malformed."""


class ConfigError(GpdistillError, ValueError):
    """A config file contains unknown keys/sections or unparseable values."""
