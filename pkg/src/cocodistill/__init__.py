"""Cross-layer correlation distillation on toy segmentation networks."""

__version__ = "0.1.0"
