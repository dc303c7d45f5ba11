"""Numerical laboratory for tempered linear processes and TFBMII regression limits."""

__version__ = "0.1.0"
