"""Depth-based 6-DoF pose estimation by iterated likelihood weighting over rendered hypotheses."""

__version__ = "0.1.0"
