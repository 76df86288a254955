"""Adversarially regularized slice-group segmentation for volumetric images."""

__version__ = "0.1.0"
