"""Planner and step simulator for n-D parallel training of omni-modal transformers."""

__version__ = "0.1.0"
