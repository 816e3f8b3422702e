"""Hybrid model- and data-driven UWB localization with particle-based inference."""

__version__ = "0.1.0"
