"""Sampling non-log-concave densities: algorithms, hard instances, diagnostics."""

__version__ = "0.1.0"
