"""Constructive smooth-activation network approximation."""

__version__ = "0.1.0"
