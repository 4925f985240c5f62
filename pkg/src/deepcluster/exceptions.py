"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ConfigError -> 1,
FormatError/DataError -> 2, DivergenceError -> 3.
"""


class DeepClusterError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(DeepClusterError):
    """Invalid configuration or unusable combination of options."""


class FormatError(DeepClusterError):
    """Malformed or unsupported file content (WAV encoding, bad magic, truncation)."""


class DataError(DeepClusterError):
    """Invalid in-memory data: shape mismatches, violated preconditions, domain errors."""


class DivergenceError(DeepClusterError):
    """Training produced a non-finite loss; the last checkpoint is preserved."""
