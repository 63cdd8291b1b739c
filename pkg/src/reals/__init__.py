"""Representation-aligned latent spaces for latent diffusion, at desk scale."""

__version__ = "0.1.0"
