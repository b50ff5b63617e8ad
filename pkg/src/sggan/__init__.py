"""Semantic-guided adversarial thermal-to-visible face synthesis."""

__version__ = "0.1.0"
