"""Desk-scale Fusion-in-Decoder laboratory: a numpy FiD reader, controlled
context-quality environments, cross-attention probes and attention control."""

__version__ = "0.1.0"
