"""Temporal-prior video segmentation at desk scale."""

__version__ = "0.1.0"
