"""Unit tests for rrt-eta."""
