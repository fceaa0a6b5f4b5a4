"""Dynamic problem lists: per-problem attention over clinical narratives with an outcome head."""

from .errors import DataError

__version__ = "0.1.0"

__all__ = ["DataError", "__version__"]
