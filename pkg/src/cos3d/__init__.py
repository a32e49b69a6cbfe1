"""Chain-of-sight 3D detection data: geometry, serialization, curation, packing and evaluation."""

__version__ = "0.1.0"
