"""Tests for the iterative bootstrap engine."""
