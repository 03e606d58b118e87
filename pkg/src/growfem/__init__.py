"""Octree-based finite-element toolkit for growing domains."""
__version__ = "0.1.0"
