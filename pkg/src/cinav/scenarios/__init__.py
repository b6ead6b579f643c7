"""Packaged scenario definitions (JSON)."""
