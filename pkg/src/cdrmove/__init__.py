"""Mobility and tie-strength analytics for call detail records."""

__version__ = "0.1.0"
