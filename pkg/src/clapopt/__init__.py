"""Per-roadblock latent-space soft-prompt optimization toolkit."""

__version__ = "0.1.0"
