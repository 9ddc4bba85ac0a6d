"""Exponential tilting of the smoothed-score target to match training moments.

The constrained particle dynamics targets, in the large-particle limit, a
density of the form ``exp(-V(z) - lam^T z - (z-mu)^T Lam (z-mu)/2)`` whose
mean and covariance equal the training moments.  This module estimates the
tilt pair ``(lam, Lam)`` from training data, builds moment-matched energy
models and the minimum-energy classifier on top of them, and provides a 2D
grid-quadrature solver that computes the tilt directly from the moment
constraints for desk-scale verification.

Estimators:  ``lam_hat = -mean_i g(x_i)`` and ``C_hat = mean_i (x_i - mu)
g(x_i)^T`` with ``g = grad V``; ``Lam_hat`` solves the regularized Lyapunov
equation ``(cov + zeta I) Lam + Lam (cov + zeta I) = 2 (I - sym(C_hat))``.
The leave-one-out variant evaluates ``g`` at each training point against the
mixture with that point removed, which strips the self-attraction term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import NoConvergence
from .gmm import (SmoothingConfig, TrainingSet, _antithetic_center_mean,
                  _softmax_means, log_density, smoothed_potential)
from .numerics import lyapunov_solve
from .rng import TAG_MODEL, SubstreamKey
from .validation import as_matrix, check_symmetric

PROVENANCES = ("empirical", "leave_one_out", "self_consistent")


@dataclass
class TiltingParams:
    """Linear and quadratic tilt, Lyapunov regularizer, provenance."""

    lam: np.ndarray
    Lam: np.ndarray
    zeta: float = 0.0
    provenance: str = "empirical"

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        self.Lam = check_symmetric(self.Lam, "Lam")
        if self.zeta < 0.0:
            raise ValueError(f"zeta must be >= 0, got {self.zeta}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def zeros(cls, dim, provenance="self_consistent"):
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0.0, provenance)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam.tolist(),
            "Lambda": self.Lam.tolist(),
            "zeta": self.zeta,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TiltingParams":
        return cls(np.asarray(doc["lambda"]), np.asarray(doc["Lambda"]),
                   float(doc["zeta"]), doc["provenance"])


def default_zeta(cov) -> float:
    """Scale-relative Lyapunov regularizer: 1e-6 * tr(cov) / d."""
    cov = np.asarray(cov)
    return 1e-6 * float(np.trace(cov)) / cov.shape[0]


def tilting_from_scores(points, scores, mean, cov, zeta,
                        provenance="empirical") -> TiltingParams:
    """Tilt estimate from given score values at given points.

    Exact for affine scores: with ``g(z) = z - mean`` and unit covariance the
    estimate is (0, 0).
    """
    points = as_matrix(points, "points")
    scores = as_matrix(scores, "scores")
    if points.shape != scores.shape:
        raise ValueError("points and scores must have the same shape")
    n, d = points.shape
    lam = -scores.mean(axis=0)
    centered = points - np.asarray(mean)[None, :]
    c_hat = np.einsum("ni,nj->ij", centered, scores) / n
    rhs = 2.0 * (np.eye(d) - 0.5 * (c_hat + c_hat.T))
    lam_mat = lyapunov_solve(np.asarray(cov) + zeta * np.eye(d), rhs)
    return TiltingParams(lam, lam_mat, zeta, provenance)


def scores_at_training_points(ts: TrainingSet, cfg: SmoothingConfig,
                              key: SubstreamKey | None = None,
                              mode: str = "empirical") -> np.ndarray:
    """Smoothed-score gradient ``grad V`` evaluated at every training point.

    ``leave_one_out`` excludes each point's own component from the softmax.
    """
    if mode not in ("empirical", "leave_one_out"):
        raise ValueError(f"unknown mode {mode!r}")
    x = ts.points
    n, d = x.shape
    exclude = None
    if mode == "leave_one_out":
        if n < 2:
            raise ValueError("leave-one-out needs at least two training points")
        exclude = np.arange(n)
    inv = 1.0 / (cfg.delta * cfg.delta)
    if cfg.sigma == 0.0:
        c = _softmax_means(x, x, cfg.delta, exclude=exclude)
        return (x - c) * inv
    if key is None:
        key = SubstreamKey(0).child(TAG_MODEL)
    noise = key.normal((n, cfg.n_pairs, d))
    cbar = _antithetic_center_mean(x, x, cfg.sigma, noise, cfg.delta,
                                   exclude=exclude)
    return (x - cbar) * inv


def estimate_tilting(ts: TrainingSet, cfg: SmoothingConfig, zeta=None,
                     mode: str = "empirical",
                     key: SubstreamKey | None = None) -> TiltingParams:
    """Training-set estimate of the tilt pair (see module docstring)."""
    if zeta is None:
        zeta = default_zeta(ts.cov)
    g = scores_at_training_points(ts, cfg, key=key, mode=mode)
    return tilting_from_scores(ts.points, g, ts.mean, ts.cov, zeta,
                               provenance=mode)


# ---------------------------------------------------------------------------
# Moment-matched energy models and the minimum-energy classifier.


@dataclass
class EnergyModel:
    """Per-class energy ``V(z) + lam^T z + (z-mu)^T Lam (z-mu)/2 + bias``.

    The potential's Monte Carlo noise is frozen at model build (one shared
    draw for all queries) so that classification is deterministic.
    """

    training_set: TrainingSet
    smoothing: SmoothingConfig
    tilt: TiltingParams
    bias: float = 0.0
    frozen_noise: np.ndarray | None = None
    label: object = None

    def potential(self, z) -> np.ndarray:
        z = as_matrix(z, "z")
        if self.smoothing.sigma == 0.0:
            return -log_density(self.training_set, self.smoothing.delta, z)
        if self.frozen_noise is None:
            raise ValueError("sigma > 0 requires frozen noise; build with a key")
        noise = np.broadcast_to(
            self.frozen_noise, (z.shape[0],) + self.frozen_noise.shape)
        return smoothed_potential(self.training_set, self.smoothing, z,
                                  noise=noise)

    def energy(self, z) -> np.ndarray:
        """Energy without the bias (the classifier adds biases separately)."""
        z = as_matrix(z, "z")
        zc = z - self.training_set.mean[None, :]
        quad = 0.5 * np.einsum("ni,ij,nj->n", zc, self.tilt.Lam, zc)
        return self.potential(z) + z @ self.tilt.lam + quad

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "points": self.training_set.points.tolist(),
            "delta": self.smoothing.delta,
            "sigma": self.smoothing.sigma,
            "mc_samples": self.smoothing.mc_samples,
            "tilt": self.tilt.to_dict(),
            "bias": self.bias,
            "frozen_noise": None if self.frozen_noise is None
            else self.frozen_noise.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnergyModel":
        noise = doc.get("frozen_noise")
        return cls(
            training_set=TrainingSet(np.asarray(doc["points"])),
            smoothing=SmoothingConfig(doc["delta"], doc["sigma"],
                                      doc["mc_samples"]),
            tilt=TiltingParams.from_dict(doc["tilt"]),
            bias=float(doc["bias"]),
            frozen_noise=None if noise is None else np.asarray(noise),
            label=doc.get("label"),
        )


def build_energy_model(ts: TrainingSet, cfg: SmoothingConfig,
                       tilt: TiltingParams | None = None,
                       key: SubstreamKey | None = None, bias: float = 0.0,
                       label=None, zeta=None,
                       mode: str = "empirical") -> EnergyModel:
    if key is None:
        key = SubstreamKey(0).child(TAG_MODEL)
    if tilt is None:
        tilt = estimate_tilting(ts, cfg, zeta=zeta, mode=mode, key=key.child(0))
    frozen = None
    if cfg.sigma > 0.0:
        frozen = key.child(1).normal((cfg.n_pairs, ts.dim))
    return EnergyModel(ts, cfg, tilt, bias, frozen, label)


def ecm_classify(models: list[EnergyModel], z) -> np.ndarray:
    """Minimum-energy decisions over frozen models; ties pick the lowest index."""
    z = as_matrix(z, "z")
    total = np.stack([m.energy(z) + m.bias for m in models], axis=1)
    idx = np.argmin(total, axis=1)
    labels = [m.label if m.label is not None else i
              for i, m in enumerate(models)]
    return np.asarray(labels, dtype=object)[idx]


def calibrate_biases(energies, labels, lr: float = 1.0, tol: float = 1e-8,
                     max_iters: int = 10_000) -> np.ndarray:
    """Scalar per-class biases minimizing cross-entropy of ``-E - b`` logits.

    Convex in the biases alone (the energies stay frozen); plain full-batch
    gradient descent, converged when the gradient max-norm drops below tol.
    A single class gets bias 0.
    """
    e = as_matrix(energies, "energies")
    labels = np.asarray(labels, dtype=np.intp)
    n, c = e.shape
    if labels.shape != (n,) or labels.min(initial=0) < 0 or \
            labels.max(initial=0) >= c:
        raise ValueError("labels must index the energy columns")
    if c == 1:
        return np.zeros(1)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    b = np.zeros(c)
    for _ in range(max_iters):
        logits = -e - b[None, :]
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        grad = (onehot - p).mean(axis=0)
        if np.abs(grad).max() < tol:
            break
        b -= lr * grad
    return b


class MinimumEnergyClassifier(BaseEstimator):
    """Generative classifier: lowest moment-matched energy wins.

    ``fit`` builds one frozen energy model per class (sorted label order);
    ``calibrate`` fits the scalar per-class biases on held-out data.
    Decisions are deterministic given the fitted models.
    """

    def __init__(self, delta=0.1, sigma=0.2, mc_samples=16, zeta=None,
                 estimator_mode="empirical", random_state=0):
        self.delta = delta
        self.sigma = sigma
        self.mc_samples = mc_samples
        self.zeta = zeta
        self.estimator_mode = estimator_mode
        self.random_state = random_state

    def fit(self, X, y):
        X = as_matrix(X, "X")
        y = np.asarray(y)
        if y.shape[0] != X.shape[0]:
            raise ValueError("X and y must have matching lengths")
        cfg = SmoothingConfig(self.delta, self.sigma, self.mc_samples)
        self.classes_ = np.unique(y)
        key = SubstreamKey(self.random_state).child(TAG_MODEL)
        self.models_ = []
        for ci, label in enumerate(self.classes_):
            ts = TrainingSet(X[y == label])
            self.models_.append(
                build_energy_model(ts, cfg, key=key.child(ci), label=label,
                                   zeta=self.zeta, mode=self.estimator_mode))
        self.biases_ = np.zeros(len(self.classes_))
        return self

    def _check_fitted(self):
        if not hasattr(self, "models_"):
            raise NotFittedError("call fit before predicting")

    def decision_energies(self, X) -> np.ndarray:
        self._check_fitted()
        X = as_matrix(X, "X")
        e = np.stack([m.energy(X) for m in self.models_], axis=1)
        return e + self.biases_[None, :]

    def calibrate(self, X, y):
        """Fit the per-class biases on a labeled validation set."""
        self._check_fitted()
        X = as_matrix(X, "X")
        y = np.asarray(y)
        if not np.isin(y, self.classes_).all():
            raise ValueError("validation labels contain unseen classes")
        idx = np.searchsorted(self.classes_, y)
        e = np.stack([m.energy(X) for m in self.models_], axis=1)
        self.biases_ = calibrate_biases(e, idx)
        return self

    def predict(self, X) -> np.ndarray:
        e = self.decision_energies(X)
        return self.classes_[np.argmin(e, axis=1)]


# ---------------------------------------------------------------------------
# 2D grid quadrature: tilted densities, their moments, and the direct solve.


@dataclass
class GridSpec:
    """Regular 2D grid; bounds default to the data box plus 6*(delta+sigma)."""

    n_x: int = 201
    n_y: int = 201
    margin: float | None = None
    bounds: tuple | None = None

    def resolve(self, ts: TrainingSet, cfg: SmoothingConfig):
        if self.bounds is not None:
            (x0, x1), (y0, y1) = self.bounds
        else:
            margin = self.margin
            if margin is None:
                margin = 6.0 * (cfg.delta + cfg.sigma)
            x0, y0 = ts.points.min(axis=0) - margin
            x1, y1 = ts.points.max(axis=0) + margin
        xs = np.linspace(x0, x1, self.n_x)
        ys = np.linspace(y0, y1, self.n_y)
        return xs, ys


def _trapezoid_weights(xs):
    w = np.full(xs.shape, xs[1] - xs[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


class GridDensity2D:
    """Trapezoid-normalized density on a regular 2D grid."""

    def __init__(self, xs, ys, log_unnormalized):
        self.xs = xs
        self.ys = ys
        logu = log_unnormalized - log_unnormalized.max()
        u = np.exp(logu)
        self.weights = np.outer(_trapezoid_weights(xs), _trapezoid_weights(ys))
        z = (u * self.weights).sum()
        self.density = u / z
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        self._nodes = np.stack([gx, gy], axis=-1)

    @property
    def mass(self) -> np.ndarray:
        return self.density * self.weights

    def mean(self) -> np.ndarray:
        m = self.mass
        return np.array([(m * self._nodes[..., 0]).sum(),
                         (m * self._nodes[..., 1]).sum()])

    def second_moment_about(self, center) -> np.ndarray:
        c = np.asarray(center, dtype=np.float64)
        dx = self._nodes[..., 0] - c[0]
        dy = self._nodes[..., 1] - c[1]
        m = self.mass
        sxx = (m * dx * dx).sum()
        syy = (m * dy * dy).sum()
        sxy = (m * dx * dy).sum()
        return np.array([[sxx, sxy], [sxy, syy]])

    def cov(self) -> np.ndarray:
        return self.second_moment_about(self.mean())

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw from the piecewise-bilinear interpolant by cell choice plus
        rejection inside the chosen cell."""
        f = self.density
        dx = self.xs[1] - self.xs[0]
        dy = self.ys[1] - self.ys[0]
        cells = 0.25 * (f[:-1, :-1] + f[1:, :-1] + f[:-1, 1:] + f[1:, 1:])
        probs = (cells * dx * dy).ravel()
        probs = probs / probs.sum()
        chosen = rng.choice(probs.size, size=n, p=probs)
        ix, iy = np.unravel_index(chosen, cells.shape)
        f00, f10 = f[ix, iy], f[ix + 1, iy]
        f01, f11 = f[ix, iy + 1], f[ix + 1, iy + 1]
        fmax = np.maximum.reduce([f00, f10, f01, f11])
        out = np.empty((n, 2))
        todo = np.arange(n)
        while todo.size:
            u = rng.random(todo.size)
            v = rng.random(todo.size)
            w = rng.random(todo.size)
            t = todo
            fb = ((1 - u) * (1 - v) * f00[t] + u * (1 - v) * f10[t]
                  + (1 - u) * v * f01[t] + u * v * f11[t])
            ok = w * fmax[t] <= fb
            hit = t[ok]
            out[hit, 0] = self.xs[ix[hit]] + u[ok] * dx
            out[hit, 1] = self.ys[iy[hit]] + v[ok] * dy
            todo = t[~ok]
        return out


def potential_grid(ts: TrainingSet, cfg: SmoothingConfig, xs, ys,
                   key: SubstreamKey | None = None) -> np.ndarray:
    """Smoothed potential on the grid nodes.

    Exact (log-density) path at sigma = 0; otherwise antithetic Monte Carlo
    with one frozen noise draw shared by every node, which keeps the field
    smooth across the grid.
    """
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if cfg.sigma == 0.0:
        v = -log_density(ts, cfg.delta, nodes)
    else:
        if key is None:
            key = SubstreamKey(0).child(TAG_MODEL)
        frozen = key.normal((cfg.n_pairs, 2))
        noise = np.broadcast_to(frozen, (nodes.shape[0],) + frozen.shape)
        v = smoothed_potential(ts, cfg, nodes, noise=noise)
    return v.reshape(len(xs), len(ys))


def _tilted_logu(v_grid, xs, ys, params: TiltingParams, center):
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    lin = params.lam[0] * gx + params.lam[1] * gy
    cx = gx - center[0]
    cy = gy - center[1]
    quad = 0.5 * (params.Lam[0, 0] * cx * cx + 2.0 * params.Lam[0, 1] * cx * cy
                  + params.Lam[1, 1] * cy * cy)
    return -v_grid - lin - quad


def grid_density_2d(ts: TrainingSet, cfg: SmoothingConfig,
                    params: TiltingParams, grid: GridSpec,
                    key: SubstreamKey | None = None,
                    center=None) -> GridDensity2D:
    """Normalized tilted density on a 2D grid."""
    if ts.dim != 2:
        raise ValueError("grid quadrature is 2D only")
    xs, ys = grid.resolve(ts, cfg)
    v = potential_grid(ts, cfg, xs, ys, key=key)
    c = ts.mean if center is None else np.asarray(center, dtype=np.float64)
    return GridDensity2D(xs, ys, _tilted_logu(v, xs, ys, params, c))


def solve_tilting_selfconsistent_2d(ts: TrainingSet, cfg: SmoothingConfig,
                                    grid: GridSpec, damping: float = 0.5,
                                    max_iters: int = 200, tol: float = 1e-6,
                                    key: SubstreamKey | None = None,
                                    target_mean=None,
                                    target_cov=None) -> TiltingParams:
    """Tilt parameters whose 2D grid density reproduces the target moments.

    Solved as the strictly convex dual of the moment-constrained projection:
    damped Newton steps on the five free tilt coordinates, with the gradient
    equal to the quadrature moment mismatch and the Hessian the quadrature
    covariance of the moment statistics.  (A naive fixed-point on the
    stationarity identities is degenerate: the identities hold for *every*
    tilted density by integration by parts, so they cannot drive the
    iteration; the moment-residual form has the matched density as its
    unique fixed point.)  At convergence the grid density's mean and
    covariance equal the targets up to quadrature error, and the
    stationarity identities hold as consequences.

    Raises
    ------
    NoConvergence
        If the parameter change does not drop below ``tol`` in ``max_iters``.
    """
    if ts.dim != 2:
        raise ValueError("grid quadrature is 2D only")
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must be in (0, 1]")
    mu_t = ts.mean if target_mean is None else np.asarray(target_mean, float)
    cov_t = ts.cov if target_cov is None else np.asarray(target_cov, float)
    xs, ys = grid.resolve(ts, cfg)
    v = potential_grid(ts, cfg, xs, ys, key=key)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    ux = (gx - mu_t[0]).ravel()
    uy = (gy - mu_t[1]).ravel()
    # moment statistics paired with (lam_1, lam_2, Lam_11, Lam_12, Lam_22)
    stats = np.stack([gx.ravel(), gy.ravel(), 0.5 * ux * ux, ux * uy,
                      0.5 * uy * uy], axis=1)
    s_target = np.array([mu_t[0], mu_t[1], 0.5 * cov_t[0, 0], cov_t[0, 1],
                         0.5 * cov_t[1, 1]])
    theta = np.zeros(5)
    change = np.inf
    for _ in range(max_iters):
        lam = theta[:2]
        lam_mat = np.array([[theta[2], theta[3]], [theta[3], theta[4]]])
        params = TiltingParams(lam, lam_mat, 0.0, "self_consistent")
        dens = GridDensity2D(xs, ys, _tilted_logu(v, xs, ys, params, mu_t))
        mass = dens.mass.ravel()
        s_mean = mass @ stats
        centered = stats - s_mean[None, :]
        hess = centered.T @ (centered * mass[:, None])
        hess += 1e-12 * np.trace(hess) / 5.0 * np.eye(5)
        step_vec = damping * np.linalg.solve(hess, s_mean - s_target)
        theta = theta + step_vec
        change = np.abs(step_vec).max()
        if change < tol:
            lam = theta[:2]
            lam_mat = np.array([[theta[2], theta[3]], [theta[3], theta[4]]])
            return TiltingParams(lam, lam_mat, 0.0, "self_consistent")
    raise NoConvergence(
        f"tilt solve: parameter change {change:.3e} still above {tol:g} "
        f"after {max_iters} iterations"
    )
