"""Guideline-governed risk stratification with an auditable rule layer."""

__version__ = "0.1.0"
