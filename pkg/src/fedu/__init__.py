"""Desk-scale simulator for federated unsupervised representation learning."""

__version__ = "0.1.0"
