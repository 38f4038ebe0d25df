"""Unfitted mixed interior-penalty DG for 2D time-harmonic Maxwell on level-set domains."""

__version__ = "0.1.0"
