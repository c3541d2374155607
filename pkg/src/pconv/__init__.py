"""Permutohedral lattice convolutions for sparse, non-grid signals."""

from .filterbank import (
    Kernel,
    PermutohedralFrame,
    build_frame,
    convolve,
    dense_oracle,
    filter_signal,
    gaussian_kernel,
    normalized_filter,
    slice,
    splat,
)
from .lattice import LatticeMap, elevate, locate, neighbor_offsets

__version__ = "0.1.0"

__all__ = [
    "Kernel",
    "LatticeMap",
    "PermutohedralFrame",
    "build_frame",
    "convolve",
    "dense_oracle",
    "elevate",
    "filter_signal",
    "gaussian_kernel",
    "locate",
    "neighbor_offsets",
    "normalized_filter",
    "slice",
    "splat",
]
