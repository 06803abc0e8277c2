"""Self-training with uncertainty-weighted pseudo labels for lesion segmentation under domain shift."""

__version__ = "0.1.0"
