"""Manifests, raster I/O and the synthetic benchmark."""
