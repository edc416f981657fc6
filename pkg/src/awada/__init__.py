"""Attention-weighted adversarial style transfer for domain adaptation at desk scale."""

__version__ = "0.1.0"
