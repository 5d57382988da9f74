"""Structured dictionary learning with cross-label suppression and group regularization."""
