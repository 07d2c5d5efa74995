"""Collaborative automatic modulation classification workbench."""

__version__ = "0.1.0"
