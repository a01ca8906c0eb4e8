"""General-purpose user representations from behavioral event logs."""

__version__ = "0.1.0"
