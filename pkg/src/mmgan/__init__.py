"""Multimodal (RGB, depth, normal) GAN with fidelity and consistency discriminators."""

__version__ = "0.1.0"
