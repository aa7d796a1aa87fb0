"""Conditional latent-ODE forecasting of irregularly sampled trajectories."""
__version__ = "0.1.0"
