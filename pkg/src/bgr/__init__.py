"""Boundary-aware graph reasoning kernels for semantic segmentation.

Dense reference and factorized propagation over a similarity graph whose
edges are amplified near predicted object boundaries, plus the supporting
pieces: boundary extraction and the learned boundary branch, a small
reverse-mode tape, a complexity harness, and a synthetic training pipeline.
"""

from .graph import (
    BoundaryAwareGraph,
    EmbeddingParams,
    boundary_reweight_dense,
    build_graph,
    degree_dense,
    degree_factorized,
    embed,
    hat_features,
    similarity,
)
from .reasoning import (
    BgrConfig,
    LayerParams,
    QFactors,
    bgr_forward,
    build_q_factors,
    layer_efficient,
    layer_naive,
    normalize_degrees,
)
from .tensor import DomainError, ShapeError

__version__ = "0.1.0"

__all__ = [
    "BgrConfig",
    "BoundaryAwareGraph",
    "DomainError",
    "EmbeddingParams",
    "LayerParams",
    "QFactors",
    "ShapeError",
    "bgr_forward",
    "boundary_reweight_dense",
    "build_graph",
    "build_q_factors",
    "degree_dense",
    "degree_factorized",
    "embed",
    "hat_features",
    "layer_efficient",
    "layer_naive",
    "normalize_degrees",
    "similarity",
    "__version__",
]
