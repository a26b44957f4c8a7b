"""Toy latent audio diffusion with selective guidance and latent control heads."""

__version__ = "0.1.0"
