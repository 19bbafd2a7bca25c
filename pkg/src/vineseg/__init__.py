"""Grapevine leaf segmentation: a small autodiff engine, U-Net variants,
supervised and fuzzy c-means training, metrics and synthetic data."""

__version__ = "0.1.0"
