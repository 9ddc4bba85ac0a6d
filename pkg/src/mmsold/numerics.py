"""Dense linear-algebra kernels shared by all modules.

Cholesky and the symmetric eigensolver wrap LAPACK (the contract is the
residual bound, not the algorithm).  The reduced QR is a modified
Gram-Schmidt with reorthogonalization: its reductions over the long axis go
through numpy's pairwise sums, so results do not depend on BLAS thread count,
which the sampler's determinism contract needs.  The Lyapunov solve works in
the eigenbasis of its SPD coefficient.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import IllConditioned, NoConvergence, NotPositiveDefinite, RankDeficient
from .validation import check_symmetric


class SpdFactorization(NamedTuple):
    original: np.ndarray
    chol: np.ndarray  # lower triangular, original = chol @ chol.T


class SymEig(NamedTuple):
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthogonal, columns


def cholesky_spd(a) -> SpdFactorization:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is non-positive (degenerate covariance; the caller must
        regularize, e.g. with partial whitening).
    """
    a = check_symmetric(a, "A")
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if not np.all(np.diag(chol) > 0.0):
        raise NotPositiveDefinite("non-positive Cholesky pivot")
    return SpdFactorization(a, chol)


def sym_eig(a) -> SymEig:
    """Eigendecomposition A = Q diag(w) Q^T with eigenvalues ascending."""
    a = check_symmetric(a, "A")
    try:
        w, q = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return SymEig(w, q)


def reduced_qr_signfix(a):
    """Reduced QR of a tall matrix with a positive R diagonal.

    Modified Gram-Schmidt with a second orthogonalization pass.  Column norms
    are the R diagonal, so positivity holds by construction (the conventional
    diagonal sign correction is a no-op here).

    Returns
    -------
    (Q, R) : Q is P x d with orthonormal columns, R is d x d upper triangular.

    Raises
    ------
    RankDeficient
        If a pivot falls below ``1e-12 * ||A||_F`` (collapsed columns).
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < a.shape[1]:
        raise ValueError(f"need a tall P x d matrix, got shape {a.shape}")
    p, d = a.shape
    scale = np.sqrt((a * a).sum())
    tol = 1e-12 * scale
    q = np.array(a, copy=True)
    r = np.zeros((d, d))
    for j in range(d):
        v = q[:, j]
        for _ in range(2):  # reorthogonalize: once is not enough near rank loss
            for i in range(j):
                rij = (q[:, i] * v).sum()
                v -= rij * q[:, i]
                r[i, j] += rij
        norm = np.sqrt((v * v).sum())
        if not norm > tol:
            raise RankDeficient(
                f"column {j} has pivot {norm:.3e} below {tol:.3e}"
            )
        r[j, j] = norm
        q[:, j] = v / norm
    return q, r


def lyapunov_solve(s, b) -> np.ndarray:
    """Solve S X + X S = B for symmetric X, with S symmetric positive-definite.

    In the eigenbasis of S the solution is entrywise:
    ``X_ij = B_ij / (s_i + s_j)``.

    Raises
    ------
    IllConditioned
        If ``min eig(S) < 1e-12 * max eig(S)``.
    """
    s = check_symmetric(s, "S")
    b = check_symmetric(b, "B")
    if s.shape != b.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {b.shape}")
    w, q = sym_eig(s)
    if w[0] <= 0.0 or w[0] < 1e-12 * w[-1]:
        raise IllConditioned(
            f"eigenvalue range [{w[0]:.3e}, {w[-1]:.3e}] too ill-conditioned"
        )
    b_tilde = q.T @ b @ q
    x_tilde = b_tilde / (w[:, None] + w[None, :])
    x = q @ x_tilde @ q.T
    return 0.5 * (x + x.T)
