"""Semantic mapping and lane-graph navigation for orchard point clouds."""

__version__ = "0.1.0"
