"""Cost models and measurements for the two propagation paths.

The closed-form multiply-add counts below are definitions, not estimates:
they sum the per-primitive costs (see ``tensor``) of exactly the operation
sequence ``run_naive`` and ``run_efficient`` execute, so an instrumented run
must reproduce them to the flop. Conventions worth restating: an
(m, k) @ (k, n) product costs m*n*(2k-1); elementwise ops cost one per
element; summing n values costs n-1; the clamped inverse square root costs
2 per entry (sqrt, divide); ReLU costs one select per element.

Wall-clock sweeps pin the BLAS thread pool to one thread when threadpoolctl
is importable, discard a warm-up run (which doubles as the allocation
measurement), and report the median of the timed repeats.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor
from .graph import (
    boundary_reweight_dense,
    degree_dense,
    degree_factorized,
    hat_features,
    similarity,
)
from .reasoning import (
    LayerParams,
    build_q_factors,
    layer_efficient,
    layer_naive,
    normalize_degrees,
)
from .tensor import DomainError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - present via scikit-learn in practice
    threadpool_limits = None

CSV_HEADER = "path,N,c,layers,flops,peak_aux_elems,wall_ms"


@dataclass(frozen=True)
class CostReport:
    path: str  # "naive" or "efficient"
    n: int
    c: int
    layers: int
    flops: int
    peak_aux_elems: int
    wall_ms: float

    def csv_row(self) -> str:
        return (
            f"{self.path},{self.n},{self.c},{self.layers},"
            f"{self.flops},{self.peak_aux_elems},{self.wall_ms:.6f}"
        )


def _check_geometry(n: int, c: int, layers: int) -> None:
    if n < 1 or c < 1 or layers < 1:
        raise DomainError("N, c and layers must all be >= 1")


def naive_flop_terms(n: int, c: int, layers: int) -> dict[str, int]:
    """Per-stage multiply-add counts of the dense reference path."""
    _check_geometry(n, c, layers)
    per_layer = (
        2 * n  # degree inverse square root
        + 2 * n * n  # two-sided degree scaling of the adjacency
        + n * c * (2 * n - 1)  # propagation (N, N) @ (N, c)
        + n * c * (2 * c - 1)  # layer weight (N, c) @ (c, c)
        + n * c  # activation
    )
    return {
        "similarity": n * n * (2 * c - 1),
        "reweight": 3 * n * n,
        "degree": n * (n - 1),
        "layers": layers * per_layer,
    }


def flops_naive(n: int, c: int, layers: int) -> int:
    return sum(naive_flop_terms(n, c, layers).values())


def efficient_flop_terms(n: int, c: int, layers: int) -> dict[str, int]:
    """Per-stage multiply-add counts of the factorized path; every term is O(N)."""
    _check_geometry(n, c, layers)
    per_layer = (
        2 * c * c * (2 * n - 1)  # two inner (c, N) @ (N, c) products
        + 2 * n * c * (2 * c - 1)  # two outer (N, c) @ (c, c) products
        + n * c  # branch sum
        + n * c * (2 * c - 1)  # layer weight
        + n * c  # activation
    )
    return {
        "boosted_features": 2 * n * c,
        "degree": 2 * c * (n - 1) + 2 * n * (2 * c - 1) + n,
        "degree_rsqrt": 2 * n,
        "q_factors": 2 * n * c,
        "layers": layers * per_layer,
    }


def flops_efficient(n: int, c: int, layers: int) -> int:
    return sum(efficient_flop_terms(n, c, layers).values())


def run_naive(
    feats: np.ndarray,
    scores: np.ndarray,
    weights: list[np.ndarray],
    eps: float = 1e-6,
) -> np.ndarray:
    """Dense reference run whose op sequence defines ``flops_naive``."""
    adj = similarity(feats)
    adj_bw = boundary_reweight_dense(adj, scores)
    degrees = degree_dense(adj_bw)
    out = feats
    for w in weights:
        out = layer_naive(out, adj_bw, degrees, LayerParams(w), activate=True, eps=eps)
    return out


def run_efficient(
    feats: np.ndarray,
    scores: np.ndarray,
    weights: list[np.ndarray],
    eps: float = 1e-6,
) -> np.ndarray:
    """Factorized run whose op sequence defines ``flops_efficient``."""
    boosted = hat_features(feats, scores)
    degrees = degree_factorized(feats, boosted)
    d_inv_sqrt = normalize_degrees(degrees, eps)
    q = build_q_factors(feats, boosted, d_inv_sqrt)
    out = feats
    for w in weights:
        out = layer_efficient(out, q, LayerParams(w), activate=True)
    return out


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log y against log x."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.size < 3 or ys.size != xs.size:
        raise DomainError("need at least 3 matched points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise DomainError("log-log fit needs positive values")
    lx = np.log(xs)
    ly = np.log(ys)
    lx_c = lx - lx.mean()
    return float((lx_c * (ly - ly.mean())).sum() / (lx_c * lx_c).sum())


def _sweep_inputs(n: int, c: int, layers: int, seed: int):
    base = seed + 7919 * n
    feats = (tensor.seeded_random(n, c, base, "uniform") + 1.0) / 2.0
    scores = ((tensor.seeded_random(n, 1, base + 1, "uniform") + 1.0) / 2.0)[:, 0]
    weights = [tensor.seeded_random(c, c, base + 2 + i, "uniform") for i in range(layers)]
    return feats, scores, weights


def timing_sweep(
    ns: list[int],
    c: int = 16,
    layers: int = 2,
    repeats: int = 5,
    seed: int = 0,
    paths: tuple[str, ...] = ("naive", "efficient"),
) -> list[CostReport]:
    """Run both paths over a size sweep; returns one CostReport per (path, N).

    An out-of-memory failure on the dense path skips that point instead of
    aborting the sweep.
    """
    if repeats < 5:
        raise DomainError("repeats must be >= 5")
    runners = {"naive": (run_naive, flops_naive), "efficient": (run_efficient, flops_efficient)}
    for p in paths:
        if p not in runners:
            raise DomainError(f"unknown path {p!r}")
    reports: list[CostReport] = []

    def measure():
        for n in ns:
            feats, scores, weights = _sweep_inputs(n, c, layers, seed)
            for path in paths:
                runner, flop_model = runners[path]
                try:
                    with tensor.track() as stats:  # warm-up, discarded from timing
                        runner(feats, scores, weights)
                    walls = []
                    for _ in range(repeats):
                        start = time.perf_counter()
                        runner(feats, scores, weights)
                        walls.append((time.perf_counter() - start) * 1000.0)
                except MemoryError:
                    continue
                reports.append(
                    CostReport(
                        path=path,
                        n=n,
                        c=c,
                        layers=layers,
                        flops=flop_model(n, c, layers),
                        peak_aux_elems=stats.peak_alloc_elems,
                        wall_ms=float(np.median(walls)),
                    )
                )

    if threadpool_limits is not None:
        with threadpool_limits(limits=1):
            measure()
    else:
        measure()
    return reports


def sweep_slopes(reports: list[CostReport]) -> dict[str, float]:
    """Fitted log-log wall-time slope per path present in the reports."""
    slopes = {}
    for path in ("naive", "efficient"):
        rows = [r for r in reports if r.path == path]
        if len(rows) >= 3:
            slopes[path] = fit_loglog_slope([r.n for r in rows], [r.wall_ms for r in rows])
    return slopes


def write_csv(path, reports: list[CostReport]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(CSV_HEADER + "\n")
        for report in reports:
            handle.write(report.csv_row() + "\n")
