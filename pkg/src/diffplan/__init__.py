"""Diffusion prior over joint-space trajectories, steered by an ensemble of collision costs."""

__version__ = "0.1.0"
