"""Cloudlet micro-data-center runtime and deterministic simulator."""

__version__ = "0.1.0"
