"""Mobile Portrait - one-shot head avatar animation on a from-scratch numpy engine."""

__version__ = "0.1.0"
__author__ = "Mobile Portrait"

__all__ = ["__version__"]
