"""eofuse: desk-scale multi-sensor fusion and attention-supervised segmentation."""

__version__ = "0.1.0"
