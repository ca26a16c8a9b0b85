"""Exception taxonomy shared by all modules.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, numeric failures exit 3.
"""


class PnmaError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(PnmaError):
    """Operand shapes do not conform; message names both shapes."""


class DomainError(PnmaError):
    """Input outside an operation's domain (empty vector, bad tag id, ...)."""


class ParseError(PnmaError):
    """Malformed corpus text; message carries the offending line number."""


class FormatError(PnmaError):
    """Malformed binary or tabular artifact (magic, version, truncation, digest)."""


class CoverageError(PnmaError):
    """A required (sentence, token) key is missing from an auxiliary file."""


class CapacityError(PnmaError):
    """A size bound was violated (e.g. K larger than the usable memory)."""


class CompatibilityError(PnmaError):
    """Two artifacts do not belong together (checkpoint/memory digest mismatch)."""


class NumericError(PnmaError):
    """A non-finite value appeared where a finite one is guaranteed."""


class ConfigError(PnmaError):
    """Bad run configuration: unknown key, missing value, wrong type."""
