"""Probabilistic-robust constructive-interference precoding for MISO downlink."""

__version__ = "0.1.0"
