"""Segmentation by hierarchical pixel clustering at the downsampling layers of a small backbone.

The package ships its own reverse-mode autodiff engine on numpy, the clustering
modules and decoder, two segmentation heads, training, metrics, Netpbm I/O and a
command-line interface (``hcseg``).
"""

__version__ = "0.1.0"
