"""Taxonomy-aware contrastive retrieval for normalized product attribute values.

Train a shared hashed n-gram text encoder with contrastive sampling over an
attribute taxonomy, index candidate value embeddings offline, and predict
normalized attribute values (including null) with a dynamic null-score
threshold at inference time.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, StaleIndexError, TaclrError, TaxonomyError

__all__ = [
    "ConfigError",
    "DataError",
    "StaleIndexError",
    "TaclrError",
    "TaxonomyError",
    "__version__",
]
