"""Entrypoint sources for the bundled experiment images."""
