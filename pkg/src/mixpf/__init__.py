"""Particle filtering with learned Gaussian-mixture transition and proposal
models, trained end to end through a stop-gradient differentiable filter."""

__version__ = "0.1.0"
