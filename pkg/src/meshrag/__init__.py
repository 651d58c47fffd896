"""Part-wise mesh generation with retrieved spatial context."""

__version__ = "0.1.0"
