"""Prompt selection for LLM-based recommenders: prompt grid, evaluation protocol and RPI-based selection."""

__version__ = "0.1.0"
