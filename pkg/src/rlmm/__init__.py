"""Person-level decision-consistency estimation from sequential process data."""

__version__ = "0.1.0"
