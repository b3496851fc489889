"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions should
reuse one of the existing classes where possible.
"""


class BankcastError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(BankcastError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(BankcastError):
    """Missing, malformed, or out-of-contract data (exit code 3)."""


class DivergenceError(BankcastError):
    """Training produced non-finite values (exit code 4)."""


class VersionMismatchError(BankcastError):
    """Persisted artifacts disagree about the parameters that produced them (exit code 5)."""


class DegenerateEmbedding(BankcastError):
    """A vector with (near-)zero norm reached a normalization step."""


class NondeterministicLoss(BankcastError):
    """Two forward passes of a supposedly deterministic loss disagreed."""
