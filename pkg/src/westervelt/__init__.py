"""Multiharmonic Westervelt forward solver and frozen-Newton parameter reconstruction."""

__version__ = "0.1.0"
