"""Concurrent treatment-effect estimation for platform trials with non-concurrent controls."""

__version__ = "0.1.0"
