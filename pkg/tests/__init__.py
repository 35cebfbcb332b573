"""Test package for rrt-eta."""
