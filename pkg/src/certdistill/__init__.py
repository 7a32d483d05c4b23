"""Certainty distillation and entropy-minimisation baselines for test-time adaptation."""

__version__ = "0.1.0"
