"""Coarse-to-fine recursive speech separation for an unknown number of speakers."""

__version__ = "0.1.0"
