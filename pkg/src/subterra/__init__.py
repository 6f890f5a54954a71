"""Subterra: deterministic mine-exploration simulator and autonomy stack."""

__version__ = "0.1.0"
