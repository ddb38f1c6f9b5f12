"""Learned and random drivers sharing a multi-lane ring road."""

__version__ = "0.1.0"
