"""Residue-type classification from voxelized protein microenvironments."""

__version__ = "0.1.0"
