"""Attention-loss guidance for a toy text-to-image diffusion model, on a small numpy autodiff engine."""

__version__ = "0.1.0"
