"""Source separation by clustering learned time-frequency embeddings.

The package covers the full pipeline: synthetic mixture corpus construction,
an STFT front-end, a recurrent embedding network trained from scratch, a
partition-affinity training objective, clustering of embeddings into binary
masks, signal reconstruction, a sparse-NMF baseline, and evaluation metrics.
"""

from .exceptions import (
    ConfigError,
    DataError,
    DeepClusterError,
    DivergenceError,
    FormatError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DeepClusterError",
    "DivergenceError",
    "FormatError",
    "__version__",
]
