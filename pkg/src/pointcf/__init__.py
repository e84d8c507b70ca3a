"""Point convolution modulated by feature-difference attention.

Kernel library and CLI: a small float64 autodiff engine, exact kNN and grid
subsampling, the reweighted point-convolution operator family with naive
equivalence oracles, a residual U-Net backbone, and a desk-scale training
and evaluation harness.
"""

from .tensor import Tensor, backward, grad_check
from .geometry import PointCloud, Neighborhood, SubsampleMap, knn, brute_force_knn, grid_subsample

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "PointCloud",
    "Neighborhood",
    "SubsampleMap",
    "knn",
    "brute_force_knn",
    "grid_subsample",
]

__version__ = "0.1.0"
