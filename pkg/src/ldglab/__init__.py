"""Numerical laboratory for Landau-de Gennes minimizers with a half-degree defect."""

__version__ = "0.1.0"
