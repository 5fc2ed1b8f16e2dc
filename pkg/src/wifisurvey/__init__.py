"""Simulated autonomous WiFi-fingerprint surveying and localization."""

__version__ = "0.1.0"
