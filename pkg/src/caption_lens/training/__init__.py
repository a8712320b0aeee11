"""Optimisation, losses and the XE/SCST training loops."""
