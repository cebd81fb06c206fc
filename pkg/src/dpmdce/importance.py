"""Wasserstein feature importance and the preference-weighted Mahalanobis metric.

The 1-D Wasserstein distance between two fitted distributions is evaluated in
quantile space: W_p(P,Q) = (integral over u of |F_P^{-1}(u) - F_Q^{-1}(u)|^p)^(1/p),
by midpoint quadrature. Per-neuron distances between two classes, fused across
the selected layers, give the importance vector lambda; the metric then
measures sqrt((x-c)^T (M + beta*diag(lambda)) (x-c)) with M the ridge-inverted
sample covariance of training features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .distributions import FittedDistribution
from .featstat import LayerSelection, StatsFile
from .fusion import FusionConfig, merge_weighted, pool_to_common

QUAD_NODES = 2048
QUAD_EPS = 1e-6

_nodes_cache: dict[int, np.ndarray] = {}


def _quad_nodes(n: int) -> np.ndarray:
    if n not in _nodes_cache:
        h = (1.0 - 2.0 * QUAD_EPS) / n
        _nodes_cache[n] = QUAD_EPS + h * (np.arange(n) + 0.5)
    return _nodes_cache[n]


def wasserstein_1d(
    p: FittedDistribution, q: FittedDistribution, order: float = 1.0, nodes: int = QUAD_NODES
) -> float:
    """Order-p Wasserstein distance between two 1-D fitted distributions."""
    if order < 1:
        raise ValueError("order must be >= 1")
    if p.family == "degenerate_point" and q.family == "degenerate_point":
        return abs(p.params[0] - q.params[0])
    u = _quad_nodes(nodes)
    qp = np.asarray(p.ppf(u), dtype=np.float64)
    qq = np.asarray(q.ppf(u), dtype=np.float64)
    if not (np.isfinite(qp).all() and np.isfinite(qq).all()):
        raise ValueError("quantile function produced non-finite values")
    h = (1.0 - 2.0 * QUAD_EPS) / nodes
    integral = float(np.sum(np.abs(qp - qq) ** order) * h)
    return integral ** (1.0 / order)


@dataclass
class ImportanceVector:
    class_a: int
    class_b: int
    values: np.ndarray  # length V, nonnegative
    fusion: FusionConfig
    skipped_pairs: int = 0  # (layer, class)-pairs missing from the stats

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("importance must be a vector")
        if not np.isfinite(self.values).all() or (self.values < 0).any():
            raise ValueError("importance entries must be finite and nonnegative")

    def __len__(self) -> int:
        return self.values.size

    def normalized(self) -> np.ndarray:
        """Scaled to unit mean, so the beta weight has a scale-free meaning."""
        m = self.values.mean()
        if m <= 0:
            return np.zeros_like(self.values)
        return self.values / m


def build_importance(
    class_a: int,
    class_b: int,
    stats: StatsFile,
    selection: LayerSelection | None = None,
    fusion: FusionConfig | None = None,
    order: float = 1.0,
) -> ImportanceVector:
    """Per-neuron Wasserstein distances between two classes, fused over layers."""
    selection = selection or stats.selection
    fusion = fusion or FusionConfig()
    if selection is None:
        raise ValueError("no layer selection available")
    layer_vectors = []
    skipped = 0
    for layer in selection.selected_layers:
        fits = stats.layer_fits(layer)
        width = stats.layer_widths[layer]
        vec = np.zeros(width)
        if class_a in fits and class_b in fits:
            fa, fb = fits[class_a], fits[class_b]
            for j in range(width):
                vec[j] = wasserstein_1d(fa[j], fb[j], order)
        else:
            skipped += 1
        layer_vectors.append(vec)
    v = fusion.common_width or min(vec.size for vec in layer_vectors)
    merged = merge_weighted([pool_to_common(vec, v) for vec in layer_vectors], fusion.weight_base)
    return ImportanceVector(class_a, class_b, merged, fusion, skipped_pairs=skipped)


def estimate_precision(features, ridge: float = 1e-3, invert: bool = True) -> np.ndarray:
    """Ridge-regularized inverse sample covariance of a feature matrix.

    ``invert=False`` returns the regularized covariance itself instead, for
    the variant that plugs the covariance straight into the quadratic form.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    if not np.isfinite(x).all():
        raise ValueError("features must be finite")
    cov = np.cov(x, rowvar=False)
    cov = np.atleast_2d(cov) + ridge * np.eye(x.shape[1])
    if not invert:
        return (cov + cov.T) / 2.0
    m = np.linalg.inv(cov)
    return (m + m.T) / 2.0


@dataclass
class DpmdMetric:
    """Quadratic-form distance with an importance-weighted diagonal boost."""

    matrix: np.ndarray  # V x V, symmetric PSD
    beta: float = 1.0
    importance: np.ndarray | None = None  # lambda, length V; None = zeros
    effective: np.ndarray = field(init=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        v = self.matrix.shape[0]
        if self.matrix.shape != (v, v):
            raise ValueError("metric matrix must be square")
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-8):
            raise ValueError("metric matrix must be symmetric")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        lam = np.zeros(v) if self.importance is None else np.asarray(self.importance, dtype=np.float64)
        if lam.shape != (v,):
            raise ValueError("importance length must match the matrix")
        if (lam < 0).any():
            raise ValueError("importance entries must be nonnegative")
        self.importance = lam
        self.effective = self.matrix + self.beta * np.diag(lam)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def euclidean(cls, dim: int) -> "DpmdMetric":
        return cls(np.eye(dim), beta=0.0)


def dpmd_distance(x, center, metric: DpmdMetric) -> float:
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if x.shape != (metric.dim,) or center.shape != (metric.dim,):
        raise ValueError(f"expected vectors of length {metric.dim}")
    d = x - center
    return float(np.sqrt(max(d @ metric.effective @ d, 0.0)))


def dpmd_gradient(x, center, metric: DpmdMetric) -> np.ndarray:
    """d/dx of dpmd_distance; zero at x == center (subgradient convention)."""
    x = np.asarray(x, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    d = x - center
    val = np.sqrt(max(d @ metric.effective @ d, 0.0))
    if val <= 0.0:
        return np.zeros_like(d)
    return (metric.effective @ d) / val
