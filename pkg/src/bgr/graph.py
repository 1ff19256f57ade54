"""Boundary-aware graph construction over pixel nodes.

Node features come from a per-pixel affine embedding of a feature map. Edge
weight between nodes i and j is the feature inner product, amplified by
(2 + scores[i] + scores[j]) where ``scores`` holds per-pixel boundary
probabilities. The dense functions materialize the N x N adjacency as a
reference; the factorized ones reach the same degrees through N x c products
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .tensor import DomainError, ShapeError


@dataclass(frozen=True)
class EmbeddingParams:
    """Per-pixel affine map: out = pixel @ weight + bias."""

    weight: np.ndarray  # (c_in, c_out)
    bias: np.ndarray  # (c_out,)

    def __post_init__(self):
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias length {self.bias.shape} does not match weight cols {self.weight.shape}"
            )


@dataclass(frozen=True)
class BoundaryAwareGraph:
    """Node features plus everything needed to propagate without the dense adjacency."""

    feats: np.ndarray  # (N, c)
    boosted: np.ndarray  # (N, c), row i scaled by 1 + scores[i]
    scores: np.ndarray  # (N,), in [0, 1]
    degrees: np.ndarray  # (N,), row sums of the reweighted adjacency


def _check_scores(scores: np.ndarray, n: int) -> np.ndarray:
    scores = tensor.as_vector(scores)
    if scores.shape[0] != n:
        raise ShapeError(f"{scores.shape[0]} boundary scores for {n} nodes")
    if scores.size and (scores.min() < 0.0 or scores.max() > 1.0):
        raise DomainError("boundary scores must lie in [0, 1]")
    return scores


def embed(x: np.ndarray, params: EmbeddingParams) -> np.ndarray:
    """Map an (h, w, c_in) feature map to (h*w, c_out) node features."""
    nodes = tensor.reshape_hw_to_nodes(x)
    if nodes.shape[1] != params.weight.shape[0]:
        raise ShapeError(
            f"feature map has {nodes.shape[1]} channels, embedding expects {params.weight.shape[0]}"
        )
    out = tensor.matmul(nodes, params.weight)
    return tensor.add(out, np.broadcast_to(params.bias, out.shape))


def similarity(feats: np.ndarray) -> np.ndarray:
    """Gram matrix of node features: sim[i, j] = <feats[i], feats[j]>."""
    feats = tensor.as_matrix(feats)
    return tensor.matmul(feats, feats.T)


def boundary_reweight_dense(adj: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Scale edge (i, j) by (2 + scores[i] + scores[j]); dense reference path."""
    adj = tensor.as_matrix(adj)
    if adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj.shape}")
    scores = _check_scores(scores, adj.shape[0])
    weights = scores[:, None] + scores[None, :]
    weights += 2.0
    out = adj * weights
    tensor.record_alloc(weights.size)
    tensor.record_alloc(out.size)
    tensor.record_flops(3 * adj.size)
    return out


def hat_features(feats: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Boosted node features: row i of feats scaled by (1 + scores[i])."""
    feats = tensor.as_matrix(feats)
    scores = tensor.as_vector(scores)
    if scores.shape[0] != feats.shape[0]:
        raise ShapeError(f"{scores.shape[0]} scores for {feats.shape[0]} rows")
    return tensor.add(tensor.row_scale(feats, scores), feats)


def degree_dense(adj_bw: np.ndarray) -> np.ndarray:
    """Row sums of a materialized reweighted adjacency; reference path."""
    adj_bw = tensor.as_matrix(adj_bw)
    if adj_bw.shape[0] != adj_bw.shape[1]:
        raise ShapeError(f"adjacency must be square, got {adj_bw.shape}")
    return tensor.row_sums(adj_bw)


def degree_factorized(feats: np.ndarray, boosted: np.ndarray) -> np.ndarray:
    """Degrees of the reweighted graph without materializing it.

    Computes boosted @ (column sums of feats) + feats @ (column sums of
    boosted), inner sums first; peak auxiliary storage stays O(N + c).
    """
    feats = tensor.as_matrix(feats)
    boosted = tensor.as_matrix(boosted)
    if feats.shape != boosted.shape:
        raise ShapeError(f"shapes differ, {feats.shape} vs {boosted.shape}")
    sum_plain = tensor.col_sums(feats)
    sum_boost = tensor.col_sums(boosted)
    left = tensor.matmul(boosted, sum_plain[:, None])
    right = tensor.matmul(feats, sum_boost[:, None])
    return tensor.add(left, right)[:, 0]


def build_graph(feats: np.ndarray, scores: np.ndarray) -> BoundaryAwareGraph:
    """Validate scores, derive boosted features and factorized degrees."""
    feats = tensor.as_matrix(feats)
    scores = _check_scores(scores, feats.shape[0])
    boosted = hat_features(feats, scores)
    degrees = degree_factorized(feats, boosted)
    return BoundaryAwareGraph(feats=feats, boosted=boosted, scores=scores, degrees=degrees)
