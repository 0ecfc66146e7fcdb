"""Arbitrary-resolution text-to-image generation over a neural image field latent."""

__version__ = "0.1.0"
