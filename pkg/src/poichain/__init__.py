"""Proof-of-Interaction puzzle and a blockchain built on it, with a network simulator."""

__version__ = "0.1.0"
