"""One-shot contour-primitive-of-interest extraction toolkit."""

__version__ = "0.1.0"
