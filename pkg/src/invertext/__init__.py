"""Black-box text embedding inversion (iterative correction) with defenses and evaluation."""

__version__ = "0.1.0"
