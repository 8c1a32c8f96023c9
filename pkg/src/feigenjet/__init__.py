"""Poly-time drawing of the Julia set of the Feigenbaum renormalization fixed point."""

__version__ = "0.1.0"
