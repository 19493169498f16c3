"""Desk-scale multi-modal small language model with quantized edge inference."""

__version__ = "0.1.0"
