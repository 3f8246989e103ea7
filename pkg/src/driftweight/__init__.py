"""Instance-conditional, multi-timescale temporal importance weighting."""

__version__ = "0.1.0"
