"""Multimodal hierarchical recurrent encoder-decoder for dialogue response generation."""

__version__ = "0.1.0"
