"""Skin-lesion classification with an Inception-ResNet style network."""

__version__ = "0.1.0"
