"""Distributed multi-resolution hash grid reconstruction on closely-paved region boxes."""

__version__ = "0.1.0"
