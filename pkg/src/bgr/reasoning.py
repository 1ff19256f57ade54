"""Graph convolution on the boundary-aware graph.

Two routes compute the same symmetric-normalized propagation: ``layer_naive``
materializes the N x N adjacency (the reference oracle) and ``layer_efficient``
goes through four rank-c factors, multiplying the c x c inner products first
so no N x N buffer ever exists. ``bgr_forward`` chains embed, two efficient
layers, a projection back to the input channel count, and a residual sum.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor
from .graph import EmbeddingParams, build_graph, embed
from .tensor import DomainError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerParams:
    weight: np.ndarray  # (c_in, c_out)

    def __post_init__(self):
        if not np.all(np.isfinite(self.weight)):
            raise DomainError("layer weight contains non-finite values")


@dataclass(frozen=True)
class QFactors:
    """Rank-c factors of the normalized reweighted adjacency.

    q12 and q22 are transposed views of q21 and q11; propagation is
    q11 @ (q12 @ x) + q21 @ (q22 @ x).
    """

    q11: np.ndarray  # (N, c): degree-scaled boosted features
    q12: np.ndarray  # (c, N): degree-scaled plain features, transposed
    q21: np.ndarray  # (N, c): degree-scaled plain features
    q22: np.ndarray  # (c, N): degree-scaled boosted features, transposed


@dataclass(frozen=True)
class BgrConfig:
    num_layers: int = 2
    hidden_dim: int = 16
    degree_epsilon: float = 1e-6
    activation: str = "relu"

    def __post_init__(self):
        if self.num_layers < 1:
            raise DomainError("num_layers must be >= 1")
        if self.hidden_dim < 1:
            raise DomainError("hidden_dim must be >= 1")
        if self.degree_epsilon <= 0:
            raise DomainError("degree_epsilon must be > 0")
        if self.activation != "relu":
            raise DomainError(f"unsupported activation {self.activation!r}")


def normalize_degrees(degrees: np.ndarray, eps: float) -> np.ndarray:
    """1 / sqrt(max(d, eps)) per entry.

    Degrees come from inner products and can be non-positive; the clamp keeps
    the inverse square root total. Clamped entries are counted on the active
    tracker and logged.
    """
    if eps <= 0:
        raise DomainError("eps must be > 0")
    degrees = tensor.as_vector(degrees)
    clamped = int(np.count_nonzero(degrees < eps))
    if clamped:
        tensor.record_clamped(clamped)
        logger.debug("normalize_degrees: clamped %d of %d entries", clamped, degrees.size)
    floored = np.maximum(degrees, eps)
    out = 1.0 / np.sqrt(floored)
    tensor.record_alloc(floored.size)
    tensor.record_alloc(out.size)
    tensor.record_flops(2 * degrees.size)
    return out


def layer_naive(
    h_l: np.ndarray,
    adj_bw: np.ndarray,
    degrees: np.ndarray,
    params: LayerParams,
    activate: bool = True,
    eps: float = 1e-6,
) -> np.ndarray:
    """Reference layer: materializes the dense normalized propagation matrix."""
    h_l = tensor.as_matrix(h_l)
    adj_bw = tensor.as_matrix(adj_bw)
    n = h_l.shape[0]
    if adj_bw.shape != (n, n):
        raise ShapeError(f"adjacency {adj_bw.shape} does not match {n} nodes")
    if degrees.shape[0] != n:
        raise ShapeError(f"{degrees.shape[0]} degrees for {n} nodes")
    d_inv_sqrt = normalize_degrees(degrees, eps)
    prop = tensor.row_scale(adj_bw, d_inv_sqrt)
    prop = tensor.row_scale(prop.T, d_inv_sqrt).T
    out = tensor.matmul(prop, h_l)
    out = tensor.matmul(out, params.weight)
    return tensor.relu(out) if activate else out


def build_q_factors(
    feats: np.ndarray, boosted: np.ndarray, d_inv_sqrt: np.ndarray
) -> QFactors:
    if feats.shape != boosted.shape:
        raise ShapeError(f"shapes differ, {feats.shape} vs {boosted.shape}")
    q11 = tensor.row_scale(boosted, d_inv_sqrt)
    q21 = tensor.row_scale(feats, d_inv_sqrt)
    return QFactors(q11=q11, q12=q21.T, q21=q21, q22=q11.T)


def layer_efficient(
    h_l: np.ndarray, q: QFactors, params: LayerParams, activate: bool = True
) -> np.ndarray:
    """Factorized layer; inner c x c products first, never an N x N buffer."""
    h_l = tensor.as_matrix(h_l)
    if q.q12.shape[1] != h_l.shape[0]:
        raise ShapeError(f"factors built for {q.q12.shape[1]} nodes, got {h_l.shape[0]}")
    left = tensor.matmul(q.q11, tensor.matmul(q.q12, h_l))
    right = tensor.matmul(q.q21, tensor.matmul(q.q22, h_l))
    out = tensor.matmul(tensor.add(left, right), params.weight)
    return tensor.relu(out) if activate else out


def bgr_forward(
    x: np.ndarray,
    scores: np.ndarray,
    embed_p: EmbeddingParams,
    layers: list[LayerParams],
    out_p: EmbeddingParams,
    cfg: BgrConfig,
) -> np.ndarray:
    """Full module: embed, propagate, project back, add residually onto x.

    The graph (boosted features, degrees, factors) is built once from the
    embedded features and reused by every layer.
    """
    x = tensor.as_feature_map(x)
    h, w, c = x.shape
    if len(layers) != cfg.num_layers:
        raise ShapeError(f"{len(layers)} layer params for num_layers={cfg.num_layers}")
    if out_p.weight.shape[1] != c:
        raise ShapeError(
            f"projection restores {out_p.weight.shape[1]} channels, input has {c}"
        )
    first = embed(x, embed_p)
    graph = build_graph(first, scores)
    d_inv_sqrt = normalize_degrees(graph.degrees, cfg.degree_epsilon)
    q = build_q_factors(graph.feats, graph.boosted, d_inv_sqrt)
    h_cur = first
    for params in layers:
        h_cur = layer_efficient(h_cur, q, params, activate=True)
    proj = tensor.matmul(h_cur, out_p.weight)
    proj = tensor.add(proj, np.broadcast_to(out_p.bias, proj.shape))
    delta = tensor.reshape_nodes_to_hw(proj, h, w)
    return tensor.add(x, delta)
