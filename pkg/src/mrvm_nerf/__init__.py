"""Desk-scale masked ray and view modeling for generalizable radiance fields."""

__version__ = "0.1.0"
