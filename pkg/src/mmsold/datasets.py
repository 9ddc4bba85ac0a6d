"""Synthetic 2D datasets, CSV IO, and the partial-whitening preprocessor.

Generator conventions (fixed here, since "checkerboard" and "two spirals"
have no canonical formula):

* checkerboard: uniform on the 8 dark cells of a 4x4 board over [-4, 4]^2,
  dark meaning cell parity (i + j) even.
* two_spirals: two interleaved Archimedean arms, radius growing linearly to
  2 over the requested number of turns, plus isotropic Gaussian jitter.
* circle: unit circle, equispaced angles by default (uniform by flag),
  optional radial jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .errors import ParseError
from .gmm import TrainingSet
from .numerics import sym_eig
from .validation import as_matrix

KINDS = ("checkerboard", "two_spirals", "circle")


@dataclass(frozen=True)
class Dataset2DSpec:
    kind: str
    n_samples: int
    seed: int = 0
    noise: float | None = None  # jitter std; kind-appropriate default
    turns: int = 2  # spirals
    equispaced: bool = True  # circle

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def generate_2d(spec: Dataset2DSpec) -> TrainingSet:
    """Deterministic synthetic dataset for the given spec."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_samples
    if spec.kind == "checkerboard":
        dark = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        cells = np.asarray(dark)[rng.integers(0, len(dark), size=n)]
        offsets = rng.random((n, 2)) * 2.0
        pts = -4.0 + 2.0 * cells + offsets
    elif spec.kind == "two_spirals":
        noise = 0.05 if spec.noise is None else spec.noise
        u = rng.random(n)
        arm = rng.integers(0, 2, size=n)
        theta = 2.0 * np.pi * spec.turns * u + np.pi * arm
        r = 2.0 * u
        pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        pts += noise * rng.standard_normal((n, 2))
    else:
        noise = 0.0 if spec.noise is None else spec.noise
        if spec.equispaced:
            theta = 2.0 * np.pi * np.arange(n) / n
        else:
            theta = 2.0 * np.pi * rng.random(n)
        pts = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        if noise > 0.0:
            pts += noise * rng.standard_normal((n, 2))
    return TrainingSet(pts)


def save_csv(path, matrix, header=None):
    """Write a matrix as comma-separated decimals (17 significant digits,
    LF line endings); values round-trip bit-identically through load."""
    mat = as_matrix(matrix, "matrix")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(",".join(str(h) for h in header) + "\n")
        for row in mat:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    """Rectangular numeric CSV; a non-numeric first row is treated as header."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh]
    lines = [ln for ln in lines if ln.strip() != ""]
    if not lines:
        raise ParseError(f"{path}: empty file")
    start = 0
    first = lines[0].split(",")
    try:
        [float(tok) for tok in first]
    except ValueError:
        start = 1
        if len(lines) == 1:
            raise ParseError(f"{path}: header only, no data rows")
    width = None
    for ridx, line in enumerate(lines[start:], start=start + 1):
        toks = line.split(",")
        if width is None:
            width = len(toks)
        elif len(toks) != width:
            raise ParseError(
                f"{path}: row {ridx} has {len(toks)} columns, expected {width}"
            )
        vals = []
        for cidx, tok in enumerate(toks, start=1):
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(
                    f"{path}: row {ridx}, column {cidx}: not a number: {tok!r}"
                ) from None
        rows.append(vals)
    return np.asarray(rows, dtype=np.float64)


def load_csv(path) -> TrainingSet:
    return TrainingSet(load_matrix(path))


class PartialWhitening(BaseEstimator):
    """Whitening with the largest eigenvalues capped before inversion.

    Eigenvalues are sorted descending and the top ``cap_k`` are replaced by
    the first uncapped one, keeping the spectrum monotone; scale factors are
    ``1 / sqrt(capped + eps)``.  ``cap_k = 0`` is standard whitening.
    """

    def __init__(self, cap_k=0, eps=1e-12):
        self.cap_k = cap_k
        self.eps = eps

    def fit(self, X, y=None):
        X = as_matrix(X, "X")
        d = X.shape[1]
        if not 0 <= self.cap_k < d:
            raise ValueError(f"cap_k must be in [0, {d}), got {self.cap_k}")
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        cov = np.einsum("ni,nj->ij", centered, centered) / X.shape[0]
        w, q = sym_eig(0.5 * (cov + cov.T))
        order = np.argsort(w)[::-1]
        w = w[order]
        q = q[:, order]
        capped = w.copy()
        capped[: self.cap_k] = capped[self.cap_k]
        self.eigenvalues_ = w
        self.capped_eigenvalues_ = capped
        self.components_ = q
        self.scales_ = 1.0 / np.sqrt(capped + self.eps)
        return self

    def _check_fitted(self):
        if not hasattr(self, "scales_"):
            raise NotFittedError("call fit before transforming")

    def transform(self, X) -> np.ndarray:
        self._check_fitted()
        X = as_matrix(X, "X")
        return (X - self.mean_) @ self.components_ * self.scales_

    def inverse_transform(self, Y) -> np.ndarray:
        self._check_fitted()
        Y = as_matrix(Y, "Y")
        return self.mean_ + (Y / self.scales_) @ self.components_.T


def partial_whiten(ts: TrainingSet, cap_k: int):
    """Fit the capped whitening on a training set and transform it."""
    pw = PartialWhitening(cap_k=cap_k).fit(ts.points)
    return pw, TrainingSet(pw.transform(ts.points))
