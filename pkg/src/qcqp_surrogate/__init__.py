"""Learning deterministic surrogates for robust convex QCQPs."""

__version__ = "0.1.0"
