"""Deep factorized token embeddings (Map-Expand-Reduce with group transforms)."""

__version__ = "0.1.0"
