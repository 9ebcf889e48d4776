"""Tracking, window optimization and degeneracy analysis."""
