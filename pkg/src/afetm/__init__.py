"""Fault diagnosis from adaptive function tracing."""

__version__ = "0.1.0"
