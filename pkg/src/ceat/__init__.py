"""Continual expansion-and-absorption transformer."""
