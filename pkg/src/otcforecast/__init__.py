"""Sequence models for predicting dealer trading actions in OTC bond markets."""

__version__ = "0.1.0"
