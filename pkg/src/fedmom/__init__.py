"""Federated optimization with momentum: simulator, schedules and diagnostics."""

__version__ = "0.1.0"
