"""Desk-scale visuo-tactile action model."""

__version__ = "0.1.0"
