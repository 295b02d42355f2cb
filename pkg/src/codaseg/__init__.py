"""Cross-domain contrastive self-training for semantic segmentation on a synthetic benchmark."""

__version__ = "0.1.0"
