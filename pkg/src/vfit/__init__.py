"""Video frame interpolation with separable space-time window attention."""

__version__ = "0.1.0"
