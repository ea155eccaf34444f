"""Multi-granularity self-supervised speech representation learning at desk scale."""

__version__ = "0.1.0"
