"""Isolated-word voice command recognition with continuous-density HMMs."""

__version__ = "0.1.0"
