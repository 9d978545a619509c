"""Federated generative learning: one-shot prompt-based FL against FedAvg on desk-scale data."""

__version__ = "0.1.0"
