"""Exception types shared across the package.

Every error carries a short machine-parsable ``code`` used by the CLI when
reporting failures on stderr.
"""


class QBNError(Exception):
    """Base class for all package errors."""

    code = "ERROR"


class DimensionError(QBNError, ValueError):
    """Operand shapes do not satisfy an operation's shape contract."""

    code = "DIMENSION"


class ContractError(QBNError, RuntimeError):
    """An operation was invoked outside its stated contract."""

    code = "CONTRACT"


class ConfigError(QBNError, ValueError):
    """A configuration object violates its invariants."""

    code = "CONFIG"


class InputError(QBNError, ValueError):
    """User-supplied data (tokens, indices, files) is out of range."""

    code = "INPUT"


class FormatError(QBNError, ValueError):
    """A serialized container is malformed; message names the byte offset."""

    code = "FORMAT"


class NonFiniteError(QBNError, RuntimeError):
    """A gradient or loss became NaN/Inf; message names the culprit."""

    code = "NONFINITE"
