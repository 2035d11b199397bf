"""taskwm: task-conditioned latent world-model agent with gated fusion."""

__version__ = "0.1.0"
