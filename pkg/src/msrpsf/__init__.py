"""Multispectral rotating-PSF localization and classification of point sources."""

__version__ = "0.1.0"
