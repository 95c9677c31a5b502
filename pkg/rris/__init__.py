"""Robust referring image segmentation: negative-sentence datasets, robust metrics and a toy fusion model."""

__version__ = "0.1.0"
