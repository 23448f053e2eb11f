"""vecmap - vectorized HD map construction from synthetic BEV rasters."""

__version__ = "0.1.0"
