"""Crossmodal expression perception with per-subject affective memories and a mood network."""

__version__ = "0.1.0"
