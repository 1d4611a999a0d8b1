"""Estimators, inference and Monte Carlo summaries."""
