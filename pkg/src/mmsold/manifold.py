"""Centered, scaled Stiefel-type constraint set for moment-matched particles.

A particle matrix ``Y`` (P x d) is on the constraint set when ``1^T Y = 0``
and ``Y^T Y = P I``.  Mapped back through the whitening transform this is
exactly "empirical mean equals the training mean and empirical covariance
(population convention) equals the training covariance".  The module provides
the whitening maps, the tangent projection, the centered-QR retraction, and
the chain-rule gradient pullback.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .errors import RankDeficient
from .gmm import TrainingSet
from .numerics import reduced_qr_signfix
from .validation import as_matrix

# On-manifold tolerances: looser than machine epsilon because QR
# reorthogonalization error accumulates over thousands of steps; re-retracting
# every step keeps drift bounded.
MEAN_TOL = 1e-8
GRAM_TOL = 1e-6


class WhiteningMap:
    """Affine map between data space and whitened particle space.

    Forward: ``Y = (Z - 1 mu^T) L^{-T}``; inverse: ``Z = 1 mu^T + Y L^T``
    with ``L`` the lower Cholesky factor of the covariance.
    """

    def __init__(self, mean, chol_lower):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.chol_lower = np.asarray(chol_lower, dtype=np.float64)

    @classmethod
    def from_training_set(cls, ts: TrainingSet) -> "WhiteningMap":
        return cls(ts.mean, ts.chol_lower)

    def whiten(self, z) -> np.ndarray:
        z = as_matrix(z, "Z")
        return solve_triangular(self.chol_lower, (z - self.mean).T, lower=True).T

    def unwhiten(self, y) -> np.ndarray:
        y = as_matrix(y, "Y")
        return self.mean + y @ self.chol_lower.T

    def pullback_gradient(self, g_z) -> np.ndarray:
        """Chain rule for row-stacked gradients: ``G_Y = G_Z L``."""
        g_z = as_matrix(g_z, "G_Z")
        return g_z @ self.chol_lower


def project_tangent(y, a) -> np.ndarray:
    """Orthogonal projection of ``a`` onto the tangent space at ``y``.

    Composition of centering (kill column means) with the Stiefel-type
    correction ``A - Y sym(Y^T A / P)``.  For on-manifold ``y`` the two
    commute, so the composite is an orthogonal projection: idempotent and
    self-adjoint under the Frobenius inner product.
    """
    y = np.asarray(y, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if y.shape != a.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {a.shape}")
    p = y.shape[0]
    a0 = a - a.mean(axis=0, keepdims=True)
    m = np.einsum("pi,pj->ij", y, a0) / p
    s = 0.5 * (m + m.T)
    return a0 - y @ s


def retract(y_tilde) -> np.ndarray:
    """Map a perturbed particle matrix back onto the constraint set.

    Centers the input, takes the reduced QR with positive R diagonal, and
    rescales: ``sqrt(P) * Q``.  Points already on the set map to themselves
    up to rounding.

    Raises
    ------
    RankDeficient
        If the centered matrix has collapsed columns (particle collapse);
        the sampler aborts with a diagnostic rather than continuing.
    """
    y_tilde = as_matrix(y_tilde, "Y")
    p, d = y_tilde.shape
    if p < d + 1:
        raise ValueError(f"need at least d+1={d + 1} particles, got {p}")
    centered = y_tilde - y_tilde.mean(axis=0, keepdims=True)
    q, _ = reduced_qr_signfix(centered)
    return np.sqrt(p) * q


def manifold_residuals(y) -> tuple[float, float]:
    """(max |column mean|, Frobenius norm of ``Y^T Y - P I``)."""
    y = np.asarray(y, dtype=np.float64)
    p, d = y.shape
    mean_res = float(np.abs(y.mean(axis=0)).max())
    gram = np.einsum("pi,pj->ij", y, y)
    gram_res = float(np.linalg.norm(gram - p * np.eye(d)))
    return mean_res, gram_res


def is_on_manifold(y) -> bool:
    """Check the constraint-set invariants at the module tolerances."""
    y = np.asarray(y, dtype=np.float64)
    p = y.shape[0]
    mean_res, gram_res = manifold_residuals(y)
    rms = np.sqrt((y * y).sum() / y.size) if y.size else 0.0
    return (mean_res <= MEAN_TOL * np.sqrt(p) * max(rms, 1.0)
            and gram_res <= GRAM_TOL * p)
