"""Spatio-temporal inception graph convolutional networks in NumPy."""
from .graph import (ChebyshevBasis, GraphError, GraphMatrix, SkeletonTopology, adjacency,
                    build_topology, chebyshev_basis, normalized_laplacian, scaled_laplacian)
from .model import NetworkConfig, StageSpec, STIGCN, build_stigcn, preset_config

__version__ = "0.1.0"
