"""Reputation-based worker selection for federated learning."""

__version__ = "0.1.0"
