"""Contextual bandits with Thompson sampling through local latent uncertainty."""

__version__ = "0.1.0"
