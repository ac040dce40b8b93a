"""Masked-image-modeling ViT pretraining, three-stage transfer pipeline, and experiment harness."""

__version__ = "0.1.0"
