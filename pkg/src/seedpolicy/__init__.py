"""Desk-scale imitation learning with a gated recurrent latent state and a diffusion action head."""

__version__ = "0.1.0"
