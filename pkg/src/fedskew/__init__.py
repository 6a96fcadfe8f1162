"""Federated learning simulator for studying label and quantity skew."""

__version__ = "0.1.0"
