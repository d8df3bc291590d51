"""Coupled CL / NSCL training dynamics in similarity and parameter space."""

__version__ = "0.1.0"
