"""Error types shared across the package.

The CLI maps these onto process exit codes: numeric faults exit 1, config and
usage problems exit 2, I/O and file-format problems exit 3.
"""


class NumericFaultError(ArithmeticError):
    """A primitive produced NaN or Inf, or training hit a non-finite value."""


class ShapeError(ValueError):
    """Operands have incompatible or contract-violating shapes."""


class ConfigError(ValueError):
    """Bad run configuration: unknown key, bad value, missing required entry."""


class IsolatedNodeError(ValueError):
    """Strict graph construction found a node with no neighbor inside radius."""


class ZeroTargetError(ValueError):
    """A relative metric was asked to divide by a zero-norm target."""


class FormatError(IOError):
    """Base class for binary file-format violations."""


class MagicError(FormatError):
    """File does not start with the expected magic bytes."""


class VersionError(FormatError):
    """File carries an unsupported format version."""


class TruncationError(FormatError):
    """File ends before the payload its header promises."""
