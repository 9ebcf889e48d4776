"""Geometry, images and error types."""
