"""Dense-array substrate shared by every other module.

Conventions: matrices are 2-D float64 arrays (rows x cols), feature maps are
3-D (h, w, c), vectors are 1-D. Pixel (y, x) of an h x w map linearizes to
node index i = y * w + x (row-major). All operations are pure and return
freshly allocated arrays; callers treat arrays as immutable.

Every primitive reports its output allocations and multiply-add count to the
innermost active ``track()`` context. The benchmark harness relies on these
counts being exact, so each op's cost convention is fixed here:

- (m, k) @ (k, n) matrix product: m * n * (2k - 1)
- elementwise add / multiply / activation over E elements: E
- summing n values into one: n - 1 adds
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class DomainError(ValueError):
    """A value lies outside an operation's domain."""


@dataclass
class OpStats:
    """Tally of work done inside one ``track()`` region."""

    flops: int = 0
    alloc_elems: int = 0
    peak_alloc_elems: int = 0
    clamped_degrees: int = 0


_tls = threading.local()


def _stack() -> list[OpStats]:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


@contextlib.contextmanager
def track():
    """Collect allocation and flop stats for primitives run in this context."""
    stats = OpStats()
    stack = _stack()
    stack.append(stats)
    try:
        yield stats
    finally:
        stack.pop()


def record_alloc(elems: int) -> None:
    for stats in _stack():
        stats.alloc_elems += elems
        if elems > stats.peak_alloc_elems:
            stats.peak_alloc_elems = elems


def record_flops(count: int) -> None:
    for stats in _stack():
        stats.flops += count


def record_clamped(count: int) -> None:
    for stats in _stack():
        stats.clamped_degrees += count


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def as_vector(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {v.shape}")
    return v


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product (m, k) @ (k, n) -> (m, n)."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a @ b
    record_alloc(out.size)
    record_flops(out.size * (2 * a.shape[1] - 1))
    return out


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum of two same-shape arrays."""
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    out = a + b
    record_alloc(out.size)
    record_flops(out.size)
    return out


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    out = a * float(factor)
    record_alloc(out.size)
    record_flops(out.size)
    return out


def row_scale(a: np.ndarray, s: np.ndarray) -> np.ndarray:
    """out[i, j] = a[i, j] * s[i]."""
    a = as_matrix(a)
    s = as_vector(s)
    if s.shape[0] != a.shape[0]:
        raise ShapeError(f"row_scale: {s.shape[0]} scales for {a.shape[0]} rows")
    out = a * s[:, None]
    record_alloc(out.size)
    record_flops(out.size)
    return out


def relu(a: np.ndarray) -> np.ndarray:
    out = np.maximum(a, 0.0)
    record_alloc(out.size)
    record_flops(out.size)
    return out


def row_sums(a: np.ndarray) -> np.ndarray:
    """Vector of per-row sums; rows * (cols - 1) adds."""
    a = as_matrix(a)
    out = a.sum(axis=1)
    record_alloc(out.size)
    record_flops(a.shape[0] * (a.shape[1] - 1))
    return out


def col_sums(a: np.ndarray) -> np.ndarray:
    """Vector of per-column sums; cols * (rows - 1) adds."""
    a = as_matrix(a)
    out = a.sum(axis=0)
    record_alloc(out.size)
    record_flops(a.shape[1] * (a.shape[0] - 1))
    return out


def as_feature_map(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeError(f"expected an (h, w, c) feature map, got shape {x.shape}")
    return x


def reshape_hw_to_nodes(x: np.ndarray) -> np.ndarray:
    """Flatten an (h, w, c) map to (h*w, c) node features, pixel i = y*w + x."""
    x = as_feature_map(x)
    h, w, c = x.shape
    return np.ascontiguousarray(x).reshape(h * w, c)


def reshape_nodes_to_hw(nodes: np.ndarray, h: int, w: int) -> np.ndarray:
    """Inverse of :func:`reshape_hw_to_nodes`."""
    nodes = as_matrix(nodes)
    if nodes.shape[0] != h * w:
        raise ShapeError(f"{nodes.shape[0]} rows cannot fill a {h}x{w} map")
    return np.ascontiguousarray(nodes).reshape(h, w, nodes.shape[1])


def seeded_random(
    rows: int,
    cols: int,
    seed: int,
    distribution: str = "uniform",
    spread: float = 1.0,
) -> np.ndarray:
    """Reproducible random matrix from a counter-based Philox stream.

    ``uniform`` draws from U(-spread, spread), ``normal`` from N(0, spread^2).
    The same (shape, seed, distribution, spread) always yields bit-identical
    output.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    if distribution == "uniform":
        out = rng.uniform(-spread, spread, size=(rows, cols))
    elif distribution == "normal":
        out = rng.normal(0.0, spread, size=(rows, cols))
    else:
        raise DomainError(f"unknown distribution {distribution!r}")
    record_alloc(out.size)
    return out


def _write_values(handle, a: np.ndarray) -> None:
    flat = a.reshape(a.shape[0], -1)
    for row in flat:
        handle.write(" ".join(repr(float(v)) for v in row))
        handle.write("\n")


def save_tensor(path, a: np.ndarray) -> None:
    """Write ``rows cols`` then row-major values, round-trip exact."""
    a = as_matrix(a)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{a.shape[0]} {a.shape[1]}\n")
        _write_values(handle, a)


def load_tensor(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    rows, cols = int(text[0]), int(text[1])
    values = np.array([float(v) for v in text[2:]], dtype=np.float64)
    if values.size != rows * cols:
        raise ShapeError(f"{path}: header says {rows}x{cols}, found {values.size} values")
    return values.reshape(rows, cols)


def save_feature_map(path, x: np.ndarray) -> None:
    """Write ``h w c`` then row-major (y, x, channel) values."""
    x = as_feature_map(x)
    h, w, c = x.shape
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"{h} {w} {c}\n")
        _write_values(handle, x.reshape(h * w, c))


def load_feature_map(path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    h, w, c = int(text[0]), int(text[1]), int(text[2])
    values = np.array([float(v) for v in text[3:]], dtype=np.float64)
    if values.size != h * w * c:
        raise ShapeError(f"{path}: header says {h}x{w}x{c}, found {values.size} values")
    return values.reshape(h, w, c)
