"""Constrained convex synthesis force control for peg-in-hole assembly."""

__version__ = "0.1.0"
