"""Unified space-time video inpainting at desk scale."""

__version__ = "0.1.0"
