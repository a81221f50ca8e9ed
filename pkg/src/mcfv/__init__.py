"""Desk-scale finite-volume solver building blocks: meshes, two-level partitioning,
block-CSR kernels, conflict-free assembly, MLP inference, collated I/O and metrics."""

__version__ = "0.1.0"
