"""Vocoder-projected feature discriminators for one-step diffusion distillation, at desk scale."""

__version__ = "0.1.0"
