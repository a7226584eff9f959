"""Contextualized task-relevant (CTR) attention from gameplay."""
__version__ = "0.1.0"
