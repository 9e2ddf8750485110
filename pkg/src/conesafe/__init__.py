"""Verified semantic actions for kinematic UAV pursuit-evasion."""

__version__ = "0.1.0"
