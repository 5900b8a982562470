"""Uncalibrated photometric stereo by neural inverse rendering."""

__version__ = "0.1.0"
