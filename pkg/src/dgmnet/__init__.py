"""Geometry-guided selective scanning for segmentation, in numpy with numba kernels."""
