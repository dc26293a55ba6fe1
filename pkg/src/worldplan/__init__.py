"""Proactive trajectory planning with a planner-coupled BEV world model."""

__version__ = "0.1.0"
