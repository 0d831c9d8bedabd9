"""In-context latent diffusion for small tabular datasets."""

__version__ = "0.1.0"
