"""Benchmark harness for representation learning on grayscale cell-image crops.

Four training paradigms (WSL, SSL, SSR, ICL) share one CNN backbone and are
compared on drug-similarity distances, a drug-vs-control probe and
unsupervised clustering of their embeddings.
"""

from .errors import ConfigError, DataError, HarnessError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "HarnessError", "NumericalError", "__version__"]
