"""Boundary score maps: ground-truth extraction and the learned branch.

The extractor marks a pixel as boundary when any pixel within a Chebyshev
radius carries a different label (8-connected at radius 1). The learned
branch is a per-pixel linear -> batch norm -> ReLU -> linear -> sigmoid
stack supervised with binary cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor
from .tensor import DomainError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # fraction of the old running statistic kept per update


def extract_gt_boundary(labels: np.ndarray, radius: int = 1) -> np.ndarray:
    """Binary boundary mask of a label map, flattened row-major to (h*w,).

    A pixel scores 1.0 iff some pixel within Chebyshev distance <= radius has
    a different label; neighborhoods are cropped at the image border.
    """
    if radius < 1:
        raise DomainError("radius must be >= 1")
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"expected an (h, w) label map, got shape {labels.shape}")
    h, w = labels.shape
    mask = np.zeros((h, w), dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dy == 0 and dx == 0:
                continue
            y0, y1 = max(0, -dy), h - max(0, dy)
            x0, x1 = max(0, -dx), w - max(0, dx)
            if y0 >= y1 or x0 >= x1:
                continue
            here = labels[y0:y1, x0:x1]
            there = labels[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
            mask[y0:y1, x0:x1] |= here != there
    return mask.reshape(-1).astype(np.float64)


@dataclass
class BoundaryBranchParams:
    """Parameters of the per-pixel boundary head; running stats are mutable."""

    w1: np.ndarray  # (c, m)
    b1: np.ndarray  # (m,)
    bn_gamma: np.ndarray  # (m,)
    bn_beta: np.ndarray  # (m,)
    bn_running_mean: np.ndarray  # (m,)
    bn_running_var: np.ndarray  # (m,)
    w2: np.ndarray  # (m, 1)
    b2: np.ndarray  # (1,)

    def __post_init__(self):
        m = self.w1.shape[1]
        for name in ("b1", "bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"):
            if getattr(self, name).shape != (m,):
                raise ShapeError(f"{name} must have shape ({m},)")
        if self.w2.shape != (m, 1):
            raise ShapeError(f"w2 must have shape ({m}, 1)")
        if self.b2.shape != (1,):
            raise ShapeError("b2 must have shape (1,)")
        if np.any(self.bn_running_var < 0):
            raise DomainError("running variance must be non-negative")

    @classmethod
    def init(cls, c: int, m: int, seed: int) -> "BoundaryBranchParams":
        rng = np.random.Generator(np.random.Philox(seed))
        return cls(
            w1=rng.uniform(-1, 1, size=(c, m)) / np.sqrt(c),
            b1=np.zeros(m),
            bn_gamma=np.ones(m),
            bn_beta=np.zeros(m),
            bn_running_mean=np.zeros(m),
            bn_running_var=np.ones(m),
            w2=rng.uniform(-1, 1, size=(m, 1)) / np.sqrt(m),
            b2=np.zeros(1),
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def boundary_branch_forward(
    x: np.ndarray, params: BoundaryBranchParams, training: bool = False
) -> np.ndarray:
    """Per-pixel boundary scores in (0, 1), flattened to (h*w,).

    In training mode batch statistics are taken over the pixel axis and the
    running statistics are updated in place (momentum ``BN_MOMENTUM``); eval
    mode uses the stored running statistics and is pure.
    """
    nodes = tensor.reshape_hw_to_nodes(x)
    if nodes.shape[1] != params.w1.shape[0]:
        raise ShapeError(
            f"feature map has {nodes.shape[1]} channels, branch expects {params.w1.shape[0]}"
        )
    z = nodes @ params.w1 + params.b1
    if training:
        mean = z.mean(axis=0)
        var = z.var(axis=0)
        params.bn_running_mean *= BN_MOMENTUM
        params.bn_running_mean += (1.0 - BN_MOMENTUM) * mean
        params.bn_running_var *= BN_MOMENTUM
        params.bn_running_var += (1.0 - BN_MOMENTUM) * var
    else:
        mean = params.bn_running_mean
        var = params.bn_running_var
    z = (z - mean) / np.sqrt(var + BN_EPS) * params.bn_gamma + params.bn_beta
    z = np.maximum(z, 0.0)
    logit = z @ params.w2 + params.b2
    return _sigmoid(logit[:, 0])


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy; pred strictly inside (0, 1), target in {0, 1}."""
    pred = tensor.as_vector(pred)
    target = tensor.as_vector(target)
    if pred.shape != target.shape:
        raise ShapeError(f"shapes differ, {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DomainError("empty prediction vector")
    if pred.min() <= 0.0 or pred.max() >= 1.0:
        raise DomainError("predictions must lie strictly inside (0, 1)")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise DomainError("targets must be 0 or 1")
    terms = target * np.log(pred) + (1.0 - target) * np.log1p(-pred)
    return float(-terms.mean())


def save_label_map(path, labels: np.ndarray, num_classes: int) -> None:
    """Write ``h w K`` then h*w integers."""
    labels = np.asarray(labels)
    h, w = labels.shape
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{h} {w} {num_classes}\n")
        for row in labels:
            handle.write(" ".join(str(int(v)) for v in row))
            handle.write("\n")


def load_label_map(path) -> tuple[np.ndarray, int]:
    text = Path(path).read_text(encoding="utf-8").split()
    h, w, num_classes = int(text[0]), int(text[1]), int(text[2])
    values = np.array([int(v) for v in text[3:]], dtype=np.int64)
    if values.size != h * w:
        raise ShapeError(f"{path}: header says {h}x{w}, found {values.size} labels")
    labels = values.reshape(h, w)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise DomainError(f"{path}: labels outside [0, {num_classes})")
    return labels, num_classes


def save_pgm(path, grey: np.ndarray) -> None:
    """Write a binary (P5) PGM image from a 2-D array of values in [0, 255]."""
    grey = np.asarray(grey)
    if grey.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {grey.shape}")
    h, w = grey.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        handle.write(grey.astype(np.uint8).tobytes())


def save_mask_pgm(path, mask_flat: np.ndarray, h: int, w: int) -> None:
    """Export a flattened 0/1 boundary mask as a 0/255 PGM."""
    mask = np.asarray(mask_flat).reshape(h, w)
    save_pgm(path, (mask > 0.5) * 255)
