"""Semi-supervised domain adaptation with opposite-structure entropy training."""

__version__ = "0.1.0"
