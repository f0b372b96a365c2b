"""Generalizable dynamic radiance fields for monocular videos, desk scale."""

__version__ = "0.1.0"
