"""Isotropic Gaussian mixture over training points and its smoothed score.

The mixture places one component N(x_i, delta^2 I) on every training point.
Its log-density and score have closed forms; the smoothed potential
``V(z) = -E[log density(z + sigma*eps)]`` and its gradient are estimated by
antithetic Monte Carlo over pairs ``z +- sigma*eps``.

The gradient estimator is assembled as ``(z - mean of softmax centers) /
delta^2``: over an antithetic pair the explicit ``+-sigma*eps`` displacement
cancels exactly, so noise enters only through the centers.  This arrangement
is algebraically identical to averaging the pointwise scores but is exact for
affine scores (single-component mixtures) in floating point as well.

Randomness contract: batch evaluations draw one keyed noise buffer per call
(see :mod:`mmsold.rng`); row ``i`` of the buffer is particle i's substream.
Row results never depend on chunking, batch composition, or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularCholesky, NotPositiveDefinite
from .numerics import cholesky_spd
from .rng import SubstreamKey
from .validation import as_matrix

_CHUNK_ELEMS = 4_000_000


class TrainingSet:
    """Training points with cached empirical moments.

    The covariance uses the population (1/N) convention; the 1/(N-1)
    convention would silently break the quadratic-tilt identity tests.
    """

    def __init__(self, points):
        pts = as_matrix(points, "points")
        if pts.shape[0] < 1:
            raise ValueError("need at least one training point")
        self.points = pts
        self.mean = pts.mean(axis=0)
        centered = pts - self.mean
        cov = np.einsum("ni,nj->ij", centered, centered) / pts.shape[0]
        self.cov = 0.5 * (cov + cov.T)
        self._chol = None
        self._max_norm = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def chol_lower(self) -> np.ndarray:
        """Lower Cholesky factor of the covariance (requires positive-definite)."""
        if self._chol is None:
            try:
                self._chol = cholesky_spd(self.cov).chol
            except NotPositiveDefinite as exc:
                raise SingularCholesky(
                    "training covariance is not positive-definite; "
                    "preprocess with partial whitening or add data"
                ) from exc
        return self._chol

    @property
    def max_norm(self) -> float:
        if self._max_norm is None:
            self._max_norm = float(np.sqrt((self.points ** 2).sum(axis=1)).max())
        return self._max_norm

    def __repr__(self):  # pragma: no cover
        return f"TrainingSet(n={self.n}, dim={self.dim})"


@dataclass(frozen=True)
class SmoothingConfig:
    """Component std ``delta`` > 0, bandwidth ``sigma`` >= 0, even MC count."""

    delta: float
    sigma: float = 0.0
    mc_samples: int = 2

    def __post_init__(self):
        if not self.delta > 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if self.sigma < 0.0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.mc_samples < 2 or self.mc_samples % 2 != 0:
            raise ValueError(
                f"mc_samples must be an even count >= 2, got {self.mc_samples}"
            )

    @property
    def n_pairs(self) -> int:
        return self.mc_samples // 2


def _softmax_means(points, queries, delta, weights=None, exclude=None):
    """Softmax-weighted mean of ``points`` at each query row.

    Logits drop the per-query constant ``-|q|^2/(2 delta^2)``: it is common
    to every component and cancels in the softmax.  All reductions are
    per-row pairwise sums (einsum without BLAS dispatch), so each row's
    result is independent of batching and thread count.

    ``exclude[i] >= 0`` masks that component for query row i (leave-one-out).
    """
    n, d = points.shape
    out = np.empty_like(queries)
    half_sq = 0.5 * (points * points).sum(axis=1)
    inv = 1.0 / (delta * delta)
    block = max(1, _CHUNK_ELEMS // n)
    for s in range(0, queries.shape[0], block):
        q = queries[s:s + block]
        logits = np.einsum("qj,nj->qn", q, points)
        logits -= half_sq[None, :]
        logits *= inv
        if exclude is not None:
            ex = exclude[s:s + block]
            rows = np.nonzero(ex >= 0)[0]
            logits[rows, ex[rows]] = -np.inf
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        if weights is not None:
            e *= weights[None, :]
        t0 = e.sum(axis=1)
        t1 = np.einsum("qn,nd->qd", e, points)
        out[s:s + block] = t1 / t0[:, None]
    return out


def _antithetic_queries(z, sigma, noise):
    """Stack pair queries ``z + s*eps, z - s*eps`` as (P, 2*n_pairs, d)."""
    p, d = z.shape
    n_pairs = noise.shape[-2]
    q = np.empty((p, n_pairs, 2, d))
    disp = sigma * noise
    q[:, :, 0, :] = z[:, None, :] + disp
    q[:, :, 1, :] = z[:, None, :] - disp
    return q.reshape(p, 2 * n_pairs, d)


def _antithetic_center_mean(points, z, sigma, noise, delta, weights=None,
                            exclude=None):
    """Mean softmax center over the antithetic queries of each row of ``z``."""
    p, d = z.shape
    q = _antithetic_queries(z, sigma, noise)
    m = q.shape[1]
    ex = np.repeat(exclude, m) if exclude is not None else None
    c = _softmax_means(points, q.reshape(p * m, d), delta, weights, ex)
    return c.reshape(p, m, d).sum(axis=1) / m


def _resolve_noise(cfg, rng, noise, n_rows, dim):
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64)
        want = (n_rows, cfg.n_pairs, dim) if n_rows > 1 else (cfg.n_pairs, dim)
        if noise.shape == (cfg.n_pairs, dim) and n_rows == 1:
            return noise[None, :, :]
        if noise.shape == (n_rows, cfg.n_pairs, dim):
            return noise
        raise ValueError(f"noise must have shape {want}, got {noise.shape}")
    if isinstance(rng, SubstreamKey):
        rng = rng.generator()
    if rng is None:
        raise ValueError("sigma > 0 requires an rng or explicit noise")
    return rng.standard_normal((n_rows, cfg.n_pairs, dim))


def log_density(ts: TrainingSet, delta: float, z) -> np.ndarray | float:
    """Log-density of the mixture at ``z`` (one point or a batch of rows).

    Stabilized with max-subtraction; always finite for finite inputs.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    pts = ts.points
    n, d = pts.shape
    inv = 1.0 / (2.0 * delta * delta)
    out = np.empty(zz.shape[0])
    block = max(1, _CHUNK_ELEMS // (n * d))
    for s in range(0, zz.shape[0], block):
        diff = zz[s:s + block, None, :] - pts[None, :, :]
        logits = -(diff * diff).sum(axis=-1) * inv
        m = logits.max(axis=1)
        lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
        out[s:s + block] = lse
    out += -np.log(n) - 0.5 * d * np.log(2.0 * np.pi * delta * delta)
    return float(out[0]) if single else out


def score(ts: TrainingSet, delta: float, z) -> np.ndarray:
    """Closed-form mixture score ``(c(z) - z) / delta^2``.

    ``c(z)`` is the softmax-weighted mean of the training points and always
    lies in their convex hull.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    c = _softmax_means(ts.points, zz, delta)
    g = (c - zz) / (delta * delta)
    return g[0] if single else g


def smoothed_score(ts: TrainingSet, cfg: SmoothingConfig, z, rng=None,
                   noise=None) -> np.ndarray:
    """Antithetic MC estimate of ``grad V(z)``, the negative smoothed score.

    With ``sigma == 0`` this is exactly ``-score(ts, delta, z)`` and consumes
    no randomness.  ``noise`` may supply the pair perturbations explicitly
    (shape ``(n_pairs, d)``), which is how batch rows are reproduced.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    if cfg.sigma == 0.0:
        g = -score(ts, cfg.delta, zz)
        return g[0] if single else g
    eps = _resolve_noise(cfg, rng, noise, zz.shape[0], zz.shape[1])
    cbar = _antithetic_center_mean(ts.points, zz, cfg.sigma, eps, cfg.delta)
    g = (zz - cbar) / (cfg.delta * cfg.delta)
    return g[0] if single else g


def smoothed_potential(ts: TrainingSet, cfg: SmoothingConfig, z, rng=None,
                       noise=None) -> np.ndarray | float:
    """Antithetic MC estimate of ``V(z) = -E[log density(z + sigma*eps)]``.

    Shares the noise convention of :func:`smoothed_score`, so central finite
    differences of this potential with shared noise reproduce the score
    estimator.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    if cfg.sigma == 0.0:
        v = -log_density(ts, cfg.delta, zz)
        return float(v[0]) if single else v
    eps = _resolve_noise(cfg, rng, noise, zz.shape[0], zz.shape[1])
    q = _antithetic_queries(zz, cfg.sigma, eps)
    m = q.shape[1]
    vals = log_density(ts, cfg.delta, q.reshape(-1, zz.shape[1]))
    v = -vals.reshape(zz.shape[0], m).sum(axis=1) / m
    return float(v[0]) if single else v


def score_batch(ts: TrainingSet, cfg: SmoothingConfig, z, key=None,
                noise=None, substream_indices=None) -> np.ndarray:
    """Row-wise ``grad V`` over a particle matrix.

    Row i uses the i-th per-particle substream: one keyed buffer of shape
    ``(P, n_pairs, d)`` is drawn per call and row i reads slice i, so the
    output is bit-identical under any evaluation order or parallelism.
    ``substream_indices`` remaps rows to buffer slices (row j uses slice
    ``substream_indices[j]``).
    """
    zz = as_matrix(z, "z")
    if cfg.sigma == 0.0:
        return -score(ts, cfg.delta, zz)
    if noise is None:
        if not isinstance(key, SubstreamKey):
            raise ValueError("score_batch needs a SubstreamKey or explicit noise")
        noise = key.normal((zz.shape[0], cfg.n_pairs, zz.shape[1]))
    else:
        noise = np.asarray(noise, dtype=np.float64)
    if substream_indices is not None:
        noise = noise[np.asarray(substream_indices, dtype=np.intp)]
    cbar = _antithetic_center_mean(ts.points, zz, cfg.sigma, noise, cfg.delta)
    return (zz - cbar) / (cfg.delta * cfg.delta)
