"""Dual soft/hard attention scoring of gigapixel whole-slide images."""

__version__ = "0.1.0"
