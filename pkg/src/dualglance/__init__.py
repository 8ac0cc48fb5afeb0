"""Pairwise social relationship recognition with a two-glance model."""

__version__ = "0.1.0"
