"""Visual analogy completion with routed low-rank adapter bases on a frozen flow model."""

__version__ = "0.1.0"
