"""Limit-order-book message modeling: feed replay, tokenization, a numpy transformer and evaluation."""

__version__ = "0.1.0"
