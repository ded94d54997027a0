"""Recurrent NMT with key-value memory attention on a small autodiff engine."""

__version__ = "0.1.0"
