"""Observable-distribution alignment of tractable generative models."""

__version__ = "0.1.0"
