"""Desk-scale world-volume diffusion and world-volume-aware multi-camera image generation."""

__version__ = "0.1.0"
