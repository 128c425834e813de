"""Exact optima and convex-relaxation bounds for switched heat-equation control."""

__version__ = "0.1.0"
