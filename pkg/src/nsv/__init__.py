"""Navier-Stokes-Vlasov simulator and a priori estimate harness (2D)."""

__version__ = "0.1.0"
