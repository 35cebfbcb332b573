"""Experiment harness and bundled scenarios."""
