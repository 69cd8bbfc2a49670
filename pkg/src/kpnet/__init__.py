"""Kernel-proposal instance separation for adjacent scene text."""

__version__ = "0.1.0"
