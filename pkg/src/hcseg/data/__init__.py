"""Netpbm file I/O, synthetic shape datasets and overlay outputs."""
