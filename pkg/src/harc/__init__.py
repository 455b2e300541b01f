"""Hybrid attention recommender with rating-aware histories and document context."""

__version__ = "0.1.0"
