"""bankcast: retrieval-augmented graph forecasting for cold-start regional demand.

The package combines an inductive contextual graph backbone with a time-aware
memory bank of (context, history, future) windows. Retrieved futures are fused
into the backbone forecast through a gated, zero-initialized correction, so the
untrained model is exactly the graph predictor. A seeded synthetic city
generator plus two evaluation protocols (single-city cold-start, cross-city
transfer) make the whole pipeline testable at desk scale.
"""

from .errors import (
    BankcastError,
    ConfigError,
    DataError,
    DegenerateEmbedding,
    DivergenceError,
    NondeterministicLoss,
    VersionMismatchError,
)

__version__ = "0.1.0"

__all__ = [
    "BankcastError",
    "ConfigError",
    "DataError",
    "DegenerateEmbedding",
    "DivergenceError",
    "NondeterministicLoss",
    "VersionMismatchError",
    "__version__",
]
