"""Local nearest-neighbor estimator of the negative smoothed score.

For a query ``z`` the mixture softmax is truncated to the exact K nearest
training points plus L points drawn uniformly without replacement from the
remainder, the latter reweighted by ``(N - K) / L`` so the corrected local
sums are conditionally unbiased for the full sums.  Antithetic pairs
``z +- sigma*eps`` reduce Monte Carlo variance; when the local subset is
smaller than the ambient dimension, the smoothing noise is drawn directly in
the subset's inner-product coordinates from ``N(0, G)`` with ``G`` the Gram
matrix of the selected points, which reproduces the ambient softmax law
without materializing d-dimensional Gaussians.

Because the explicit ``+-sigma*eps`` displacement cancels exactly over each
antithetic pair, the estimator output is ``(z - mean center) / delta^2`` in
both regimes; noise reaches the output only through the softmax centers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDenominator, InvalidBudget
from .gmm import SmoothingConfig, TrainingSet, _antithetic_center_mean, _softmax_means
from .rng import SubstreamKey


class NeighborIndex:
    """Exact K-nearest-neighbor queries under Euclidean distance.

    Brute force over all points; ties are broken by ascending index so that
    queries are deterministic.
    """

    def __init__(self, ts: TrainingSet):
        self.ts = ts
        self._sq_norms = (ts.points ** 2).sum(axis=1)

    def query(self, z, k: int) -> np.ndarray:
        """Indices of the k nearest training points, nondecreasing distance."""
        if not 1 <= k <= self.ts.n:
            raise InvalidBudget(f"k must be in [1, {self.ts.n}], got {k}")
        z = np.asarray(z, dtype=np.float64)
        d2 = self._sq_norms - 2.0 * (self.ts.points @ z) + (z * z).sum()
        order = np.argsort(d2, kind="stable")
        return order[:k]


def build_index(ts: TrainingSet) -> NeighborIndex:
    return NeighborIndex(ts)


@dataclass
class LocalSubset:
    """Selected indices (ascending), their weights, and optional Gram matrix."""

    indices: np.ndarray
    weights: np.ndarray
    n_neighbors: int
    n_correction: int
    gram: np.ndarray | None = None


def select_local_subset(index: NeighborIndex, z, k: int, l: int,
                        rng) -> LocalSubset:
    """Exact neighbors plus a uniform without-replacement correction draw.

    Weights are 1 on the neighbor set and ``(N - K) / L`` on the correction
    set.  Indices are returned sorted ascending so downstream summations are
    reproducible.  The Gram matrix of the selected points is attached only
    when ``k + l < d`` (the projected smoothing regime needs it).
    """
    ts = index.ts
    n = ts.n
    if k < 1 or l < 0 or k + l > n:
        raise InvalidBudget(f"need 1 <= K, 0 <= L, K+L <= {n}; got K={k}, L={l}")
    if isinstance(rng, SubstreamKey):
        rng = rng.generator()
    a_k = index.query(z, k)
    if l > 0:
        complement = np.setdiff1d(np.arange(n), a_k, assume_unique=False)
        b_l = rng.choice(complement, size=l, replace=False)
        indices = np.sort(np.concatenate([a_k, b_l]))
        in_a = np.isin(indices, a_k)
        weights = np.where(in_a, 1.0, (n - k) / l)
    else:
        indices = np.sort(a_k)
        weights = np.ones(k)
    gram = None
    if k + l < ts.dim:
        pts = ts.points[indices]
        gram = pts @ pts.T
        gram = 0.5 * (gram + gram.T)
    return LocalSubset(indices, weights, k, l, gram)


def corrected_sums(ts: TrainingSet, subset: LocalSubset, y, delta: float):
    """Unshifted corrected local sums (T0, T1) at a point ``y``.

    Verification surface for the unbiasedness property; fine for moderate
    logit ranges (no max-subtraction).
    """
    y = np.asarray(y, dtype=np.float64)
    pts = ts.points[subset.indices]
    diff = y[None, :] - pts
    e = subset.weights * np.exp(-(diff * diff).sum(axis=1) / (2.0 * delta * delta))
    return e.sum(), e @ pts


def _check_support(z, pts, weights, delta):
    diff = z[None, :] - pts
    logits = -(diff * diff).sum(axis=1) / (2.0 * delta * delta)
    m = logits.max()
    lse = m + np.log((weights * np.exp(logits - m)).sum())
    if lse < -700.0:
        raise DegenerateDenominator(
            f"softmax normalizer underflows (log T0 = {lse:.1f}); query is far "
            f"outside the data support at delta={delta:g}"
        )


def nn_smoothed_score(ts: TrainingSet, index: NeighborIndex,
                      cfg: SmoothingConfig, k: int, l: int, z, rng,
                      subset: LocalSubset | None = None,
                      noise=None) -> np.ndarray:
    """Negative smoothed score at ``z`` from a corrected local subset.

    With ``k + l == N`` all weights are 1 and the estimator matches the full
    mixture estimator exactly (bitwise, given shared noise).  ``noise``
    overrides the draw: ambient pair perturbations ``(n_pairs, d)`` when
    ``k + l >= d``, Gram-space draws ``(n_pairs, m)`` otherwise.
    """
    z = np.asarray(z, dtype=np.float64)
    if isinstance(rng, SubstreamKey):
        rng = rng.generator()
    if subset is None:
        subset = select_local_subset(index, z, k, l, rng)
    pts = ts.points[subset.indices]
    weights = subset.weights
    delta = cfg.delta
    _check_support(z, pts, weights, delta)
    inv = 1.0 / (delta * delta)

    if cfg.sigma == 0.0:
        c = _softmax_means(pts, z[None, :], delta, weights)[0]
        return (z - c) / (delta * delta)

    m = len(subset.indices)
    if m >= ts.dim:
        if noise is None:
            noise = rng.standard_normal((cfg.n_pairs, ts.dim))
        cbar = _antithetic_center_mean(pts, z[None, :], cfg.sigma,
                                       noise[None, :, :], delta, weights)[0]
        return (z - cbar) / (delta * delta)

    # Projected regime: perturb local logits by sigma*eta/delta^2 with
    # eta ~ N(0, G); the antithetic point uses the same eta with flipped sign.
    if noise is None:
        noise = rng.standard_normal((cfg.n_pairs, m))
    gram = subset.gram
    if gram is None:
        gram = pts @ pts.T
    jitter = 1e-10 * np.trace(gram) / m
    chol = np.linalg.cholesky(gram + jitter * np.eye(m))
    eta = noise @ chol.T
    base = (pts @ z - 0.5 * (pts * pts).sum(axis=1)) * inv
    shift = (cfg.sigma * inv) * eta
    logits = np.empty((cfg.n_pairs, 2, m))
    logits[:, 0, :] = base[None, :] + shift
    logits[:, 1, :] = base[None, :] - shift
    logits = logits.reshape(2 * cfg.n_pairs, m)
    mx = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - mx)
    e *= weights[None, :]
    t0 = e.sum(axis=1)
    c = np.einsum("qn,nd->qd", e, pts) / t0[:, None]
    cbar = c.sum(axis=0) / (2.0 * cfg.n_pairs)
    return (z - cbar) / (delta * delta)
