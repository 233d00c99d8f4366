"""Adversarially regularized autoencoder for short medical-style captions."""

__version__ = "0.1.0"
