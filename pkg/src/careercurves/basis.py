"""B-spline bases on the aligned unit time domain and random-walk penalty matrices.

Career curves are evaluated on percentile-of-career time ``z = t / n`` so a
single clamped knot set on [0, 1] serves every subject regardless of career
length.  The penalty matrix encodes a d-th order Gaussian random walk on the
spline coefficients, with the first d coefficients anchored through ``v`` so
the implied prior is proper.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KnotSet",
    "bspline_basis",
    "aligned_times",
    "design_matrix",
    "penalty_matrix",
    "zero_columns",
]


@dataclass(frozen=True)
class KnotSet:
    """Equally spaced inner knots on (0, 1) with (degree+1)-fold clamped boundaries."""

    inner_count: int
    degree: int = 3
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.inner_count < 1:
            raise ValueError("inner_count must be positive")
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        p, q = self.inner_count, self.degree
        inner = np.arange(1, p + 1) / (p + 1)
        full = np.concatenate([np.zeros(q + 1), inner, np.ones(q + 1)])
        object.__setattr__(self, "knots", full)

    @property
    def dimension(self) -> int:
        """Number of basis functions P = inner_count + degree + 1."""
        return self.inner_count + self.degree + 1


def bspline_basis(z_values, knots: KnotSet) -> np.ndarray:
    """Evaluate all B-spline basis functions at ``z_values``.

    Returns an (len(z), P) matrix by the Cox-de Boor recursion.  Rows sum to
    one and have at most degree+1 positive entries.  Values outside [0, 1]
    raise ValueError; an empty input yields an empty matrix.
    """
    z = np.atleast_1d(np.asarray(z_values, dtype=float))
    t = knots.knots
    q = knots.degree
    p = knots.inner_count
    P = knots.dimension
    if z.size == 0:
        return np.zeros((0, P))
    if np.any((z < 0.0) | (z > 1.0)):
        raise ValueError("basis evaluation points must lie in [0, 1]")

    n = z.size
    m = len(t) - 1
    # non-degenerate spans are indices q .. q+p
    span = np.clip(np.searchsorted(t, z, side="right") - 1, q, q + p)
    B = np.zeros((n, m))
    B[np.arange(n), span] = 1.0
    for k in range(1, q + 1):
        Bn = np.zeros((n, m - k))
        for i in range(m - k):
            d1 = t[i + k] - t[i]
            if d1 > 0.0:
                Bn[:, i] += (z - t[i]) / d1 * B[:, i]
            d2 = t[i + k + 1] - t[i + 1]
            if d2 > 0.0:
                Bn[:, i] += (t[i + k + 1] - z) / d2 * B[:, i + 1]
        B = Bn
    return B[:, :P]


def aligned_times(n, observed_games: int) -> np.ndarray:
    """Percentile-of-career times t/n for t = 1..observed_games.

    ``n`` is the total career games: the observed count for a retired player
    (last time is exactly 1) or the current imputed value for an active player
    (last time < 1).  Imputed totals may be non-integral.
    """
    n = float(n)
    if n <= 0:
        raise ValueError("career game total must be positive")
    if observed_games < 1 or observed_games > n:
        raise ValueError("observed_games must lie in 1..n")
    return np.arange(1, observed_games + 1, dtype=float) / n


def design_matrix(record_times, knots: KnotSet) -> np.ndarray:
    """Basis matrix over a subject's aligned times.

    For an active player whose observed times stop at z < 1, every basis
    column supported strictly above z is identically zero, so those
    coefficients are informed only through their cluster/global prior.
    """
    return bspline_basis(record_times, knots)


def zero_columns(H: np.ndarray) -> np.ndarray:
    """Indices of all-zero columns of a design matrix."""
    return np.flatnonzero(~np.any(H != 0.0, axis=0))


def penalty_matrix(P: int, d: int = 1, v: float = 1.0) -> np.ndarray:
    """Banded penalty matrix K of a d-th order Gaussian random walk.

    The coefficient prior is: first d coefficients iid N(0, tau^2/v^2), then
    d-th differences iid N(0, tau^2).  Jointly this is N(0, tau^2 K^{-1}) with

        K = v^2 * diag(1,..,1,0,..,0) + D_d' D_d

    where D_d is the d-th difference matrix.  K is symmetric, banded with
    bandwidth d, and strictly positive definite for v > 0.
    """
    if d < 1:
        raise ValueError("penalty order must be >= 1")
    if P <= d:
        raise ValueError("basis dimension must exceed penalty order")
    if v <= 0:
        raise ValueError("anchor scale v must be positive")
    D = np.diff(np.eye(P), n=d, axis=0)
    K = D.T @ D
    K[np.arange(d), np.arange(d)] += v * v
    return K
