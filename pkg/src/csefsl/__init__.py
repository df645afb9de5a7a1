"""Federated split learning simulator with exact cost accounting."""

__version__ = "0.1.0"
