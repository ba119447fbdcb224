"""Subject and motion customisation of a small text-to-video latent diffusion model
through zero-initialised adapters."""

__version__ = "0.1.0"
