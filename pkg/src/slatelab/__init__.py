"""Latent-type user models, slate simulators and value-based slate selection."""

__version__ = "0.1.0"
