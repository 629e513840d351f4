"""Quantization-aware training with a decaying low-rank error-compensation branch, at desk scale."""

__version__ = "0.1.0"
