"""orbitforge: desk-scale multi-view diffusion and 3D reconstruction toolkit."""

__version__ = "0.1.0"
