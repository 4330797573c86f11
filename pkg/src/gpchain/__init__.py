"""Sparse variational inference for Gaussian-process linear-chain models."""

__version__ = "0.1.0"
