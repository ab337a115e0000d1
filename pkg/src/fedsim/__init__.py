"""Deterministic federated-learning attack/defense simulator."""

__version__ = "0.1.0"
