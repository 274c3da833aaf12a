"""Desk-scale masked self-supervised pre-training for text-line recognizers."""

__version__ = "0.1.0"
