"""Graph-based next-item recommendation for two-domain shared accounts."""

__version__ = "0.1.0"
