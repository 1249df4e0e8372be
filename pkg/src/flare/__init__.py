"""Semi-supervised domain adaptation for imbalanced multi-view tabular data."""

__version__ = "0.1.0"
