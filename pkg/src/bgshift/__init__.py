"""Background-shift mitigation for class-incremental segmentation, at toy scale."""

__version__ = "0.1.0"
