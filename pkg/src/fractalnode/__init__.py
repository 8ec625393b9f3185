"""Fractal-node message passing on graphs, with partitioning, spectral analysis and experiments."""

__version__ = "0.1.0"
