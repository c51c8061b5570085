"""Hourly power outage probability per census tract from weather and tract profiles."""

__version__ = "0.1.0"
