"""Ray-traced sparse 2D/3D attention for multi-object reconstruction from posed views."""

__version__ = "0.1.0"
