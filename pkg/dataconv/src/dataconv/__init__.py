"""Converters from public corpora to EPDS v1 task datasets."""

__version__ = "0.1.0"
