"""Few-shot metric learning with Proto-Triplet and ICNN losses."""

__version__ = "0.1.0"
