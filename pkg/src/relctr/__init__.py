"""Relevance-aware CTR prediction with cross-user preference mining and exposure debiasing."""

__version__ = "0.1.0"
