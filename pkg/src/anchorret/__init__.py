"""Semantic-anchor image-to-text retrieval on synthetic multilingual word images."""

__version__ = "0.1.0"
