"""Sample-quality metrics: sliced Wasserstein-2, kernel MMD, coverage, duplicates.

All metrics are pure functions of their inputs (plus a projection seed for
SW2) and operate on plain feature matrices; the caller decides what the
features are (raw coordinates at desk scale, or embeddings loaded from CSV).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .validation import as_matrix, check_same_dim


@dataclass
class MetricReport:
    """One metric value with the configuration that produced it."""

    metric: str
    value: float
    config: dict = field(default_factory=dict)
    n_a: int = 0
    n_b: int = 0
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "config": self.config,
            "n_a": self.n_a,
            "n_b": self.n_b,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _w2_1d_squared(a_sorted, b_sorted):
    """Exact squared W2 between two 1D empirical measures.

    Equal sizes reduce to the mean squared difference of order statistics;
    unequal sizes integrate the quantile difference over the union grid of
    breakpoints, which is exact for piecewise-constant quantile functions.
    """
    n, m = a_sorted.shape[0], b_sorted.shape[0]
    if n == m:
        diff = a_sorted - b_sorted
        return (diff * diff).mean()
    ua = np.arange(1, n + 1) / n
    ub = np.arange(1, m + 1) / m
    edges = np.union1d(ua, ub)
    widths = np.diff(np.concatenate([[0.0], edges]))
    mids = edges - 0.5 * widths
    qa = a_sorted[np.searchsorted(ua, mids, side="left")]
    qb = b_sorted[np.searchsorted(ub, mids, side="left")]
    diff = qa - qb
    return (widths * diff * diff).sum()


def sliced_w2(a, b, projections: int = 512, rng=None) -> float:
    """Sliced Wasserstein-2 distance between two point sets.

    Root of the mean, over uniformly random unit directions, of the exact
    squared 1D W2 between the projected empirical distributions.  Symmetric
    and scale-equivariant under a shared projection seed.
    """
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    check_same_dim(a, b, "A", "B")
    if projections < 1:
        raise ValueError("need at least one projection")
    if rng is None:
        rng = np.random.default_rng(0)
    elif isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    d = a.shape[1]
    dirs = rng.standard_normal((projections, d))
    dirs /= np.sqrt((dirs * dirs).sum(axis=1))[:, None]
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if a.shape[0] == b.shape[0]:
        diff = pa - pb
        return float(np.sqrt((diff * diff).mean()))
    total = 0.0
    for j in range(projections):
        total += _w2_1d_squared(pa[:, j], pb[:, j])
    return float(np.sqrt(total / projections))


def kid_poly(a_features, b_features) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel.

    ``k(x, y) = (x.y / f + 1)^3`` with f the feature dimension; diagonal
    terms are excluded from the within-set means, so values can dip slightly
    below zero for same-law inputs.
    """
    a = as_matrix(a_features, "A")
    b = as_matrix(b_features, "B")
    check_same_dim(a, b, "A", "B")
    n, m = a.shape[0], b.shape[0]
    if n < 2 or m < 2:
        raise ValueError("unbiased MMD needs at least two rows per set")
    f = a.shape[1]
    k_aa = (a @ a.T / f + 1.0) ** 3
    k_bb = (b @ b.T / f + 1.0) ** 3
    k_ab = (a @ b.T / f + 1.0) ** 3
    sum_aa = (k_aa.sum() - np.trace(k_aa)) / (n * (n - 1))
    sum_bb = (k_bb.sum() - np.trace(k_bb)) / (m * (m - 1))
    sum_ab = k_ab.mean()
    return float(sum_aa + sum_bb - 2.0 * sum_ab)


def _cross_sq_dists(a, b):
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def recall_knn(test_features, gen_features, k: int = 3) -> float:
    """Coverage of the test set by generated samples.

    Each test point gets a ball whose radius is the distance to its k-th
    nearest *other* test point; the point counts as covered when at least one
    generated sample lies strictly inside.
    """
    t = as_matrix(test_features, "test")
    g = as_matrix(gen_features, "gen")
    check_same_dim(t, g, "test", "gen")
    n = t.shape[0]
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} test points, got {n}")
    d2_tt = _cross_sq_dists(t, t)
    np.fill_diagonal(d2_tt, np.inf)
    radii_sq = np.sort(d2_tt, axis=1)[:, k - 1]
    d2_tg = _cross_sq_dists(t, g)
    covered = d2_tg.min(axis=1) < radii_sq
    return float(covered.mean())


def dup_rate(train, gen, percentile: float = 5.0) -> float:
    """Fraction of generated points unusually close to a training point.

    The threshold is the given percentile (linear interpolation) of each
    training point's distance to its nearest other training point.
    """
    tr = as_matrix(train, "train")
    g = as_matrix(gen, "gen")
    check_same_dim(tr, g, "train", "gen")
    if tr.shape[0] < 2:
        raise ValueError("need at least two training points")
    d2_tt = _cross_sq_dists(tr, tr)
    np.fill_diagonal(d2_tt, np.inf)
    nn = np.sqrt(d2_tt.min(axis=1))
    tau = np.percentile(nn, percentile)
    d_gt = np.sqrt(_cross_sq_dists(g, tr).min(axis=1))
    return float((d_gt < tau).mean())
