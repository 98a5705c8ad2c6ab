"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError/DimensionError -> 1,
DataError/FormatError -> 2, NumericError -> 3.
"""


class ConfigError(ValueError):
    """Invalid configuration (dims, batch sizes, modes)."""


class DimensionError(ConfigError):
    """Shape mismatch between tensors; message names both shapes."""


class DataError(ValueError):
    """Invalid data content (bad ids, labels, missing files)."""


class FormatError(DataError):
    """Malformed on-disk artifact (blob, manifest, checkpoint)."""


class NumericError(ArithmeticError):
    """Non-finite values where finite math was required."""
