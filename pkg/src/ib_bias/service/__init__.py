"""Simulation study runner and result export."""
