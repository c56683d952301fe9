"""Dense randomized and deterministic linear-algebra primitives.

randomized_svd follows the sketch / power-iteration / small-SVD scheme:
sketch with a Gaussian test matrix of width r+l, orthonormalize, refine the
subspace q times, then solve the small problem exactly. Gaussian variates
always come from numpy's seeded PCG64 generator so results are reproducible
across platforms.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITER = 2


@dataclass
class SVDResult:
    """Thin SVD factors: U (m x r), S (r, nonincreasing), V (n x r)."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def _dense(A):
    if isinstance(A, np.ndarray):
        return A
    return A @ np.eye(A.shape[1])


def exact_svd(A):
    """Full thin SVD, used as the oracle and for small-block fallbacks."""
    A = _dense(A)
    U, s, Vh = sla.svd(A, full_matrices=False)
    return SVDResult(U=U, S=s, V=Vh.T)


def _truncate(res, r):
    return SVDResult(U=res.U[:, :r], S=res.S[:r], V=res.V[:, :r])


def randomized_svd(A, r, l=DEFAULT_OVERSAMPLE, q=DEFAULT_POWER_ITER, seed=0):
    """Rank-r randomized SVD of A (ndarray, or any operator supporting
    ``A @ X``, ``A.T @ X`` and ``.shape``).

    Parameters
    ----------
    r : target rank, 1 <= r <= min(A.shape)
    l : oversampling added to the sketch width
    q : power iterations (QR-reorthogonalized each half-step)
    seed : seeds the Gaussian test matrix

    If r + l reaches min(A.shape) the sketch would be square, so the
    routine falls back to an exact SVD (with a warning when r + l
    strictly exceeds the limit).
    """
    m, n = A.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} outside [1, {min(m, n)}]")
    if l < 0 or q < 0:
        raise ValueError("l and q must be nonnegative")
    width = r + l
    if width > min(m, n):
        warnings.warn(
            f"sketch width {width} exceeds min(m, n) = {min(m, n)}; "
            "falling back to an exact SVD",
            stacklevel=2,
        )
    if width >= min(m, n):
        return _truncate(exact_svd(A), r)

    rng = np.random.default_rng(seed)
    Omega = rng.standard_normal((n, width))
    Q = sla.qr(A @ Omega, mode="economic")[0]
    for _ in range(q):
        Qhat = sla.qr(A.T @ Q, mode="economic")[0]
        Q = sla.qr(A @ Qhat, mode="economic")[0]
    B = (A.T @ Q).T
    Ub, s, Vh = sla.svd(B, full_matrices=False)
    return SVDResult(U=(Q @ Ub)[:, :r], S=s[:r], V=Vh[:r].T)


def pivot_columns_qr(A, r):
    """Indices of the first r pivot columns of a column-pivoted QR."""
    A = np.asarray(A)
    n = A.shape[1]
    if not 1 <= r <= n:
        raise ValueError(f"r must be in [1, {n}], got {r}")
    piv = sla.qr(A, mode="economic", pivoting=True)[2]
    return np.asarray(piv[:r], dtype=np.intp)


def pivot_rows_lq(A, r):
    """Indices of the first r pivot rows of a row-pivoted LQ."""
    return pivot_columns_qr(np.asarray(A).T, r)


def pinv_truncated(A, rel_tol=1e-10):
    """SVD pseudo-inverse discarding singular values below rel_tol * sigma_max."""
    A = np.asarray(A)
    U, s, Vh = sla.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise ValueError("cannot pseudo-invert an all-zero matrix")
    keep = s >= rel_tol * s[0]
    return (Vh[keep].T / s[keep]) @ U[:, keep].T
