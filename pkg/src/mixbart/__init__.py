"""Negative-binomial soft BART regression with spatial random effects."""

from .estimator import NegBinSoftBART

__all__ = ["NegBinSoftBART", "__version__"]
__version__ = "0.1.0"
