"""Bohmian-mechanics simulator and quantum-equilibrium test harness."""

__version__ = "0.1.0"
