"""Differentiable 2D acoustic full-waveform inversion: simulator, adjoint gradients, synthetic corpora and inversion drivers."""
__version__ = "0.1.0"
