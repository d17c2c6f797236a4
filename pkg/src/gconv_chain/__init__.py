"""Compile layer graphs into GCONV chains and model them on spatial accelerators."""

__version__ = "0.1.0"
