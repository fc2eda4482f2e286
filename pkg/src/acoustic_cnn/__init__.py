"""Desk-scale CNN acoustic modeling with HF training, dropout and fMLLR-in-STC-space adaptation."""

__version__ = "0.1.0"
