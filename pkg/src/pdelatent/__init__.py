"""Physics-structured latent inference for sparse, noisy observations of linear PDE outputs."""

__version__ = "0.1.0"
