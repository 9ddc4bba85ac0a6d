"""Moment-matched, score-smoothed overdamped Langevin particle sampler.

P interacting particles evolve under the Monte Carlo smoothed score while
their empirical mean and covariance stay pinned to the training moments at
every iteration: whitened particles live on the centered, scaled
Stiefel-type constraint set, drift and noise are projected onto its tangent
space, and every update is retracted back through centered QR.  The default
discretization averages consecutive noise draws (Leimkuhler-Matthews), which
has lower invariant-measure bias than Euler-Maruyama; EM stays available for
comparison runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import gmm, nn_score
from .errors import NonFiniteState, RankDeficient
from .manifold import WhiteningMap, manifold_residuals, project_tangent, retract
from .rng import TAG_INIT, TAG_SCORE, TAG_XI, SubstreamKey
from .validation import as_matrix

SCHEMES = ("lm", "em")


@dataclass
class ParticleState:
    """Whitened particle matrix, carried noise for LM, iteration counter."""

    y: np.ndarray
    xi_prev: np.ndarray
    iteration: int = 0


def init_particles(ts: gmm.TrainingSet, smoothing: gmm.SmoothingConfig,
                   n_particles: int, key: SubstreamKey) -> ParticleState:
    """Draw particles from the training mixture, whiten, and retract.

    Each row is a training point plus ``delta * N(0, I)`` noise.  The initial
    matrix is retracted onto the constraint set so the moment invariant holds
    from iteration 0, not only after the first update.  A rank-deficient draw
    (pathological) is retried once with fresh randomness.
    """
    d = ts.dim
    if n_particles < d + 1:
        raise ValueError(
            f"need at least d+1={d + 1} particles for full covariance "
            f"matching, got {n_particles}"
        )
    wmap = WhiteningMap.from_training_set(ts)
    last_exc = None
    for attempt in range(2):
        gen = key.child(TAG_INIT, attempt).generator()
        idx = gen.integers(0, ts.n, size=n_particles)
        z0 = ts.points[idx] + smoothing.delta * gen.standard_normal((n_particles, d))
        try:
            y0 = retract(wmap.whiten(z0))
        except RankDeficient as exc:
            last_exc = exc
            continue
        xi_prev = key.child(TAG_XI, 0).normal((n_particles, d))
        return ParticleState(y=y0, xi_prev=xi_prev, iteration=0)
    raise RankDeficient(f"initial particle draw collapsed twice: {last_exc}")


def step(state: ParticleState, ts: gmm.TrainingSet,
         smoothing: gmm.SmoothingConfig, step_size: float, scheme: str = "lm",
         xi=None, score_noise=None, g_z=None,
         whitening: WhiteningMap | None = None) -> ParticleState:
    """One constrained Langevin update.

    Evaluates the smoothed-score batch in data space, pulls it back to the
    whitened space, projects drift and both noise matrices onto the tangent
    space at the current point, applies the LM half-sum (or EM) update, and
    retracts.  ``xi`` is the fresh ambient noise; ``score_noise`` the score
    estimator's pair perturbations; either can be injected for testing.
    ``g_z`` overrides the score batch entirely (used by the nearest-neighbor
    mode).
    """
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {SCHEMES}, got {scheme!r}")
    if step_size < 0.0:
        raise ValueError(f"step_size must be >= 0, got {step_size}")
    y = state.y
    p, d = y.shape
    if xi is None:
        raise ValueError("step requires the fresh noise matrix xi")
    xi = np.asarray(xi, dtype=np.float64)
    wmap = whitening or WhiteningMap.from_training_set(ts)
    if g_z is None:
        z = wmap.unwhiten(y)
        g_z = gmm.score_batch(ts, smoothing, z, noise=score_noise)
    else:
        g_z = np.asarray(g_z, dtype=np.float64)
    if not np.isfinite(g_z).all():
        raise NonFiniteState(
            f"non-finite score batch at iteration {state.iteration} "
            f"(h={step_size:g}, delta={smoothing.delta:g}); stable step sizes "
            f"scale like delta^2 = {smoothing.delta ** 2:g}"
        )
    g_y = wmap.pullback_gradient(g_z)
    drift = project_tangent(y, g_y)
    xi_new = project_tangent(y, xi)
    if scheme == "lm":
        xi_old = project_tangent(y, state.xi_prev)
        y_tilde = y - step_size * drift + np.sqrt(step_size / 2.0) * (xi_old + xi_new)
    else:
        y_tilde = y - step_size * drift + np.sqrt(2.0 * step_size) * xi_new
    if not np.isfinite(y_tilde).all():
        raise NonFiniteState(
            f"non-finite state at iteration {state.iteration} "
            f"(h={step_size:g}, delta={smoothing.delta:g}); stable step sizes "
            f"scale like delta^2 = {smoothing.delta ** 2:g}"
        )
    y_next = retract(y_tilde)
    return ParticleState(y=y_next, xi_prev=xi, iteration=state.iteration + 1)


def _nn_score_rows(ts, index, smoothing, k, l, z, key_iter):
    g = np.empty_like(z)
    for i in range(z.shape[0]):
        rng = key_iter.child(i).generator()
        g[i] = nn_score.nn_smoothed_score(ts, index, smoothing, k, l, z[i], rng)
    return g


def run(ts: gmm.TrainingSet, smoothing: gmm.SmoothingConfig, n_particles: int,
        n_iterations: int, step_size: float, scheme: str = "lm", seed: int = 0,
        score_mode: str = "full", n_neighbors: int | None = None,
        n_correction: int | None = None):
    """Full sampling run; returns data-space samples and diagnostics.

    Diagnostics record, per iteration, the max deviation of the particle mean
    from the training mean, the Frobenius residual of the whitened Gram
    constraint, and the mean absolute smoothed score, plus wall-clock time.
    Identical (seed, config, dataset) give bit-identical output regardless of
    evaluation order or thread count.
    """
    if score_mode not in ("full", "nearest_neighbor"):
        raise ValueError(f"unknown score_mode {score_mode!r}")
    if score_mode == "nearest_neighbor" and (n_neighbors is None
                                             or n_correction is None):
        raise ValueError("nearest_neighbor mode needs n_neighbors and "
                         "n_correction")
    if n_iterations < 0:
        raise ValueError("n_iterations must be >= 0")
    t_start = time.perf_counter()
    key = SubstreamKey(seed)
    state = init_particles(ts, smoothing, n_particles, key)
    wmap = WhiteningMap.from_training_set(ts)
    index = nn_score.build_index(ts) if score_mode == "nearest_neighbor" else None

    mean_res, gram_res = [], []
    mean_abs_score = []

    def record(st):
        m_res, g_res = manifold_residuals(st.y)
        z_mean_dev = float(np.abs(wmap.unwhiten(st.y).mean(axis=0) - ts.mean).max())
        mean_res.append(z_mean_dev)
        gram_res.append(g_res)

    record(state)
    p, d = state.y.shape
    for k in range(n_iterations):
        z = wmap.unwhiten(state.y)
        if score_mode == "full":
            noise = None
            if smoothing.sigma > 0.0:
                noise = key.child(TAG_SCORE, k).normal((p, smoothing.n_pairs, d))
            g_z = gmm.score_batch(ts, smoothing, z, noise=noise)
        else:
            g_z = _nn_score_rows(ts, index, smoothing, n_neighbors,
                                 n_correction, z, key.child(TAG_SCORE, k))
        xi = key.child(TAG_XI, k + 1).normal((p, d))
        try:
            state = step(state, ts, smoothing, step_size, scheme, xi=xi,
                         g_z=g_z, whitening=wmap)
        except NonFiniteState:
            raise
        except RankDeficient as exc:
            raise RankDeficient(f"iteration {k}: {exc}") from exc
        mean_abs_score.append(float(np.abs(g_z).mean()))
        record(state)

    samples = wmap.unwhiten(state.y)
    diagnostics = {
        "scheme": scheme,
        "seed": seed,
        "n_particles": n_particles,
        "n_iterations": n_iterations,
        "step_size": step_size,
        "score_mode": score_mode,
        "mean_residual": mean_res,
        "gram_residual": gram_res,
        "mean_abs_score": mean_abs_score,
        "elapsed_seconds": time.perf_counter() - t_start,
    }
    return samples, diagnostics


class MMSOLD(BaseEstimator):
    """Moment-matched score-smoothed Langevin sampler with a fit/sample API.

    Parameters
    ----------
    n_particles : number of interacting particles (= generated samples);
        must be at least d+1.
    delta : component standard deviation of the training mixture.
    sigma : score-smoothing bandwidth (0 disables smoothing).
    mc_samples : even Monte Carlo budget per score evaluation.
    step_size, n_iterations : Langevin discretization.
    scheme : "lm" (default) or "em".
    score_mode : "full" or "nearest_neighbor" (with n_neighbors/n_correction).
    random_state : integer run seed.
    """

    def __init__(self, n_particles=1000, delta=0.1, sigma=0.2, mc_samples=8,
                 step_size=5e-4, n_iterations=100, scheme="lm",
                 score_mode="full", n_neighbors=50, n_correction=50,
                 random_state=0):
        self.n_particles = n_particles
        self.delta = delta
        self.sigma = sigma
        self.mc_samples = mc_samples
        self.step_size = step_size
        self.n_iterations = n_iterations
        self.scheme = scheme
        self.score_mode = score_mode
        self.n_neighbors = n_neighbors
        self.n_correction = n_correction
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        ts = gmm.TrainingSet(X)
        ts.chol_lower  # reject degenerate covariance up front
        if self.n_particles < ts.dim + 1:
            raise ValueError(
                f"n_particles must be >= d+1 = {ts.dim + 1}, got {self.n_particles}"
            )
        self.training_set_ = ts
        return self

    def _check_fitted(self):
        if not hasattr(self, "training_set_"):
            raise NotFittedError("call fit before sample")

    def sample(self, return_diagnostics=False):
        """Run the chain; returns an (n_particles, d) sample matrix."""
        self._check_fitted()
        smoothing = gmm.SmoothingConfig(self.delta, self.sigma, self.mc_samples)
        samples, diag = run(
            self.training_set_, smoothing, self.n_particles, self.n_iterations,
            self.step_size, scheme=self.scheme, seed=self.random_state,
            score_mode=self.score_mode, n_neighbors=self.n_neighbors,
            n_correction=self.n_correction,
        )
        self.diagnostics_ = diag
        if return_diagnostics:
            return samples, diag
        return samples
