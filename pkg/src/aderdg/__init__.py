"""One-step ADER-DG solver with a posteriori sub-cell WENO finite-volume limiting."""

__version__ = "0.1.0"
