"""Cooperative channel-feature authentication for underwater acoustic networks."""

__version__ = "0.1.0"
