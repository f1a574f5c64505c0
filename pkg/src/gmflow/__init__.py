"""Numerical laboratory for flow-based generation of two-mode Gaussian
mixtures under dilated noise schedules: exact and learned probability-flow
ODEs, per-time autoencoder training, and asymptotic overlap theory."""

__version__ = "0.1.0"
