"""Comparison samplers: the closed-form flow ODE and kinetic Langevin.

``SigmaCFDM`` integrates the straight-flow probability ODE whose velocity is
built from the time-indexed mixture score, smoothed the same way as the main
sampler.  It is training-free but provably produces convex combinations of
training barycenters, which is the behavior the moment-matched sampler is
contrasted against.

``KineticLangevinBAOAB`` samples the explicitly tilted target with
independent (unconstrained) underdamped Langevin particles using the BAOAB
splitting, serving as the direct-sampling reference for the tilt estimators.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import gmm
from .errors import NonFiniteState
from .gmm import SmoothingConfig, TrainingSet, _antithetic_center_mean, _softmax_means
from .rng import TAG_INIT, TAG_MODEL, TAG_SCORE, SubstreamKey
from .tilting import TiltingParams, estimate_tilting
from .validation import as_matrix

PRESETS = ("straight", "ou")


@dataclass(frozen=True)
class TimeIndexedGMM:
    """Mean scale a(t) and component std b(t) of the time-indexed mixture.

    ``straight``: a(t) = t, b(t) = 1 - t (the flow used by the ODE sampler).
    ``ou``: a(t) = exp(-alpha t), b(t) = sqrt((1 - exp(-2 alpha t)) / alpha).
    """

    preset: str = "straight"
    alpha: float = 1.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be > 0")

    def mean_scale(self, t: float) -> float:
        if self.preset == "straight":
            return t
        return float(np.exp(-self.alpha * t))

    def std(self, t: float) -> float:
        if self.preset == "straight":
            b = 1.0 - t
        else:
            b = float(np.sqrt((1.0 - np.exp(-2.0 * self.alpha * t)) / self.alpha))
        if not b > 0.0:
            raise ValueError(f"schedule std must stay positive, got b({t}) = {b}")
        return b


def time_indexed_score(tgmm: TimeIndexedGMM, ts: TrainingSet, t: float,
                       z) -> np.ndarray:
    """Score of the time-indexed mixture: ``(c_t(z) - z) / b(t)^2``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = z[None, :] if single else z
    a = tgmm.mean_scale(t)
    b = tgmm.std(t)
    c = _softmax_means(a * ts.points, zz, b)
    s = (c - zz) / (b * b)
    return s[0] if single else s


def _smoothed_time_score(tgmm, ts, t, z, sigma, noise):
    """Antithetic smoothed time-indexed score over a particle batch."""
    a = tgmm.mean_scale(t)
    b = tgmm.std(t)
    if sigma == 0.0 or noise is None:
        c = _softmax_means(a * ts.points, z, b)
    else:
        c = _antithetic_center_mean(a * ts.points, z, sigma, noise, b)
    return (c - z) / (b * b), c


class SigmaCFDM(BaseEstimator):
    """Closed-form flow ODE sampler with a smoothed time-indexed score.

    Euler integration of ``dz/dt = (z + (1 - t) s(t, z)) / t`` from t_start
    to t_end; particles are independent and initialized from N(0, I).
    Smoothing noise is drawn fresh at every Euler step; the sigma = 0 path
    consumes no randomness.
    """

    def __init__(self, sigma=0.4, mc_samples=32, n_steps=100, t_start=0.01,
                 t_end=0.99, preset="straight", alpha=1.0, random_state=0):
        self.sigma = sigma
        self.mc_samples = mc_samples
        self.n_steps = n_steps
        self.t_start = t_start
        self.t_end = t_end
        self.preset = preset
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        self.training_set_ = TrainingSet(X)
        return self

    def _check_fitted(self):
        if not hasattr(self, "training_set_"):
            raise NotFittedError("call fit before sample")

    def sample(self, n_samples: int, return_diagnostics: bool = False):
        self._check_fitted()
        if not 0.0 < self.t_start < self.t_end < 1.0:
            raise ValueError("need 0 < t_start < t_end < 1")
        if self.sigma > 0.0:
            cfg = SmoothingConfig(1.0, self.sigma, self.mc_samples)
        ts = self.training_set_
        tgmm = TimeIndexedGMM(self.preset, self.alpha)
        key = SubstreamKey(self.random_state)
        d = ts.dim
        z = key.child(TAG_INIT).normal((n_samples, d))
        dt = (self.t_end - self.t_start) / self.n_steps
        lo = ts.points.min(axis=0)
        hi = ts.points.max(axis=0)
        hull_excess = []
        mean_support_distance = []
        t_wall = time.perf_counter()
        for k in range(self.n_steps):
            t = self.t_start + k * dt
            noise = None
            if self.sigma > 0.0:
                noise = key.child(TAG_SCORE, k).normal(
                    (n_samples, cfg.n_pairs, d))
            s, centers = _smoothed_time_score(tgmm, ts, t, z, self.sigma, noise)
            a = tgmm.mean_scale(t)
            box_lo = np.minimum(a * lo, a * hi)
            box_hi = np.maximum(a * lo, a * hi)
            excess = np.maximum(centers - box_hi[None, :],
                                box_lo[None, :] - centers).max()
            hull_excess.append(float(excess))
            z = z + dt * (z + (1.0 - t) * s) / t
            if not np.isfinite(z).all():
                raise NonFiniteState(f"non-finite state at Euler step {k}")
            d2 = ((z[:, None, :] - ts.points[None, :, :]) ** 2).sum(axis=-1)
            mean_support_distance.append(float(np.sqrt(d2.min(axis=1)).mean()))
        diagnostics = {
            "n_steps": self.n_steps,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "sigma": self.sigma,
            "mc_samples": self.mc_samples,
            "preset": self.preset,
            "seed": self.random_state,
            "hull_excess": hull_excess,
            "mean_support_distance": mean_support_distance,
            "elapsed_seconds": time.perf_counter() - t_wall,
        }
        self.diagnostics_ = diagnostics
        if return_diagnostics:
            return z, diagnostics
        return z


class KineticLangevinBAOAB(BaseEstimator):
    """Underdamped Langevin sampler for the tilted target, BAOAB splitting.

    The force is ``-(grad V(q) + lam + Lam (q - mu))``.  Particles are
    independent; positions start from the training mixture and momenta from
    N(0, I).  ``tilt`` is "empirical", "leave_one_out", "none" (zero tilt),
    or an explicit :class:`TiltingParams`.
    """

    def __init__(self, delta=0.1, sigma=0.2, mc_samples=8, step_size=1e-2,
                 friction=1.0, n_iterations=500, tilt="empirical", zeta=None,
                 random_state=0):
        self.delta = delta
        self.sigma = sigma
        self.mc_samples = mc_samples
        self.step_size = step_size
        self.friction = friction
        self.n_iterations = n_iterations
        self.tilt = tilt
        self.zeta = zeta
        self.random_state = random_state

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        ts = TrainingSet(X)
        cfg = SmoothingConfig(self.delta, self.sigma, self.mc_samples)
        key = SubstreamKey(self.random_state)
        if isinstance(self.tilt, TiltingParams):
            tilt = self.tilt
        elif self.tilt == "none":
            tilt = TiltingParams.zeros(ts.dim, provenance="empirical")
        elif self.tilt in ("empirical", "leave_one_out"):
            tilt = estimate_tilting(ts, cfg, zeta=self.zeta, mode=self.tilt,
                                    key=key.child(TAG_MODEL))
        else:
            raise ValueError(f"unknown tilt specification {self.tilt!r}")
        self.training_set_ = ts
        self.tilt_ = tilt
        return self

    def _check_fitted(self):
        if not hasattr(self, "training_set_"):
            raise NotFittedError("call fit before sample")

    def _force(self, q, cfg, noise):
        ts = self.training_set_
        g = gmm.score_batch(ts, cfg, q, noise=noise)
        return -(g + self.tilt_.lam[None, :]
                 + (q - ts.mean[None, :]) @ self.tilt_.Lam)

    def sample(self, n_samples: int, return_diagnostics: bool = False):
        self._check_fitted()
        if self.friction <= 0.0:
            raise ValueError("friction must be > 0")
        ts = self.training_set_
        cfg = SmoothingConfig(self.delta, self.sigma, self.mc_samples)
        key = SubstreamKey(self.random_state)
        d = ts.dim
        gen = key.child(TAG_INIT).generator()
        idx = gen.integers(0, ts.n, size=n_samples)
        q = ts.points[idx] + cfg.delta * gen.standard_normal((n_samples, d))
        p = gen.standard_normal((n_samples, d))
        h = self.step_size
        c1 = np.exp(-self.friction * h)
        c2 = np.sqrt(1.0 - c1 * c1)
        t_wall = time.perf_counter()

        def score_noise(k):
            if self.sigma == 0.0:
                return None
            return key.child(TAG_SCORE, k).normal((n_samples, cfg.n_pairs, d))

        force = self._force(q, cfg, score_noise(0))
        for k in range(self.n_iterations):
            p = p + 0.5 * h * force
            q = q + 0.5 * h * p
            xi = key.child(TAG_INIT, k + 1).normal((n_samples, d))
            p = c1 * p + c2 * xi
            q = q + 0.5 * h * p
            force = self._force(q, cfg, score_noise(k + 1))
            p = p + 0.5 * h * force
            if not (np.isfinite(q).all() and np.isfinite(p).all()):
                raise NonFiniteState(f"non-finite state at iteration {k}")
        self.momenta_ = p
        diagnostics = {
            "n_iterations": self.n_iterations,
            "step_size": h,
            "friction": self.friction,
            "seed": self.random_state,
            "tilt": self.tilt_.to_dict(),
            "elapsed_seconds": time.perf_counter() - t_wall,
        }
        self.diagnostics_ = diagnostics
        if return_diagnostics:
            return q, diagnostics
        return q
