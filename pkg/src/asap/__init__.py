"""Turn-level user satisfaction estimation with a discrete Hawkes intensity."""

__version__ = "0.1.0"
