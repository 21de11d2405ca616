"""Collaborative dispatch of multiple microgrids with multi-agent soft actor-critic."""

__version__ = "0.1.0"
