"""labelforge: synthesize labeled image datasets from a differentiable
scene generator via latent inversion, hypercolumn features, and an
uncertainty-filtered ensemble label generator."""

__version__ = "0.1.0"
