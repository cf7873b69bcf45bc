"""Solvers, Leray-Schauder degree tables and blow-up diagnostics for a two-component Toda system on the unit torus."""

__version__ = "0.1.0"
