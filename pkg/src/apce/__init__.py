"""Data-driven polynomial chaos surrogates for arbitrary input measures."""

__version__ = "0.1.0"
