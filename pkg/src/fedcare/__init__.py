"""Desk-scale federated learning and unlearning simulator."""

__version__ = "0.1.0"
