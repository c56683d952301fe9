"""Reference kernel approximations: Nystrom variants, random features,
truncated SVD. All report memory by the n*r convention so methods can be
compared at matched memory."""

import numpy as np
import scipy.linalg as sla

from .cluster import kmeans
from .kernels import GAUSSIAN, kernel_cross

DENSE_CAP = 8192


class LowRankFactor:
    """Rank-r kernel approximation K ~ Z Z^T (or U diag(S) V^T for the SVD
    baseline). ``memory_count`` follows the n*r accounting convention."""

    def __init__(self, kind, effective_rank, n, factor=None, svd=None, meta=None):
        self.kind = kind
        self.effective_rank = int(effective_rank)
        self.n = int(n)
        self.factor = factor
        self.svd = svd
        self.meta = meta or {}
        self.memory_count = float(n * effective_rank)

    def apply(self, v):
        v = np.asarray(v, dtype=np.float64)
        if self.svd is not None:
            U, s, Vt = self.svd
            return U @ (s * (Vt @ v))
        return self.factor @ (self.factor.T @ v)

    def dense(self):
        if self.svd is not None:
            U, s, Vt = self.svd
            return (U * s) @ Vt
        return self.factor @ self.factor.T

    def entries_at(self, rows, cols):
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if self.svd is not None:
            U, s, Vt = self.svd
            return np.einsum("tr,tr->t", U[rows] * s, Vt.T[cols])
        return np.einsum("tr,tr->t", self.factor[rows], self.factor[cols])


def _psd_root_factor(C, W, r=None, rel_tol=1e-10):
    """Z with Z Z^T = C W_r^+ C^T, where W_r is W truncated to its top-r
    eigenpairs (all of them when r is None) under the pseudo-inverse rule."""
    w, V = sla.eigh(W)
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    if r is not None:
        w = w[:r]
        V = V[:, :r]
    keep = w >= rel_tol * max(w[0], 0.0)
    keep &= w > 0.0
    if not keep.any():
        raise ValueError("landmark kernel matrix is numerically zero")
    return (C @ V[:, keep]) / np.sqrt(w[keep])


def nystrom_uniform(X, spec, r, seed=0):
    """Nystrom with 2r landmark columns sampled uniformly without
    replacement, reported at effective rank r."""
    n = X.n
    if 2 * r > n:
        raise ValueError(f"need 2r <= n, got r = {r} with n = {n}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=2 * r, replace=False))
    C = kernel_cross(spec, X.points, X.points[idx])
    W = C[idx]
    Z = _psd_root_factor(C, W, r=r)
    return LowRankFactor("nystrom", r, n, factor=Z, meta={"landmarks": idx})


def nystrom_kmeans(X, spec, r, seed=0):
    """Nystrom with the r k-means centroids (synthetic points) as landmarks."""
    n = X.n
    if r > n:
        raise ValueError(f"need r <= n, got r = {r} with n = {n}")
    centroids = kmeans(X, r, seed=seed).centers
    C = kernel_cross(spec, X.points, centroids)
    W = kernel_cross(spec, centroids, centroids)
    Z = _psd_root_factor(C, W)
    return LowRankFactor("kmeans-nystrom", r, n, factor=Z, meta={"landmarks": centroids})


def _leverage_from_eig(w, V, r):
    """Row leverage scores of the top-r eigenspace.

    Eigenvalues tied at the r-th position are treated as one block whose
    leverage is split evenly, which keeps the scores well-defined (and
    uniform for the identity matrix) under degenerate spectra.
    """
    n = V.shape[0]
    order = np.argsort(w)[::-1]
    w = w[order]
    V = V[:, order]
    lam_r = w[r - 1]
    tol = 1e-10 * max(abs(w[0]), 1e-300)
    above = np.flatnonzero(w > lam_r + tol)
    tied = np.flatnonzero(np.abs(w - lam_r) <= tol)
    m = above.size
    lev = np.zeros(n)
    if m:
        lev += np.sum(V[:, above] ** 2, axis=1)
    if tied.size:
        lev += ((r - m) / tied.size) * np.sum(V[:, tied] ** 2, axis=1)
    return lev


def leverage_scores_exact(X, spec, r, dense_cap=DENSE_CAP):
    """Exact leverage scores from the dense kernel eigendecomposition.

    O(n^2) memory and O(n^3) time, so capped at desk scale. The scores sum
    to r.
    """
    n = X.n
    if n > dense_cap:
        raise ValueError(f"n = {n} exceeds the dense cap {dense_cap}")
    if not 1 <= r <= n:
        raise ValueError(f"r must be in [1, {n}]")
    K = kernel_cross(spec, X.points, X.points)
    w, V = sla.eigh(K)
    return _leverage_from_eig(w, V, r)


def nystrom_leverage(X, spec, r, seed=0, dense_cap=DENSE_CAP):
    """Nystrom with 2r columns drawn i.i.d. proportionally to exact leverage
    scores, with the standard 1/sqrt(s p_i) importance rescaling."""
    n = X.n
    lev = leverage_scores_exact(X, spec, r, dense_cap=dense_cap)
    p = np.maximum(lev, 0.0)
    p = p / p.sum()
    rng = np.random.default_rng(seed)
    s = 2 * r
    idx = rng.choice(n, size=s, replace=True, p=p)
    scale = 1.0 / np.sqrt(s * p[idx])
    C = kernel_cross(spec, X.points, X.points[idx]) * scale[None, :]
    W = C[idx] * scale[:, None]
    Z = _psd_root_factor(C, W, r=r)
    return LowRankFactor("leverage-nystrom", r, n, factor=Z, meta={"landmarks": idx})


def rks_features(X, spec, D, seed=0):
    """Random Fourier feature map for the Gaussian kernel: K ~ Z Z^T with
    z(x) = sqrt(2/D) cos(W^T x + b), w_j ~ N(0, 2/h^2 I), b_j ~ U[0, 2pi)."""
    if spec.family != GAUSSIAN:
        raise ValueError("random Fourier features require the gaussian kernel")
    if D < 1:
        raise ValueError("need at least one feature")
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((X.d, D)) * (np.sqrt(2.0) / spec.h)
    b = rng.uniform(0.0, 2.0 * np.pi, size=D)
    Z = np.sqrt(2.0 / D) * np.cos(X.points @ W + b)
    return LowRankFactor("features", D, X.n, factor=Z, meta={"weights": W, "phases": b})


def truncated_svd_baseline(K_dense, r, dense_cap=DENSE_CAP):
    """Best rank-r approximation of a dense kernel matrix."""
    K = np.asarray(K_dense)
    n = K.shape[0]
    if n > dense_cap:
        raise ValueError(f"n = {n} exceeds the dense cap {dense_cap}")
    if not 1 <= r <= min(K.shape):
        raise ValueError(f"r must be in [1, {min(K.shape)}]")
    U, s, Vt = sla.svd(K, full_matrices=False)
    return LowRankFactor("tsvd", r, n, svd=(U[:, :r], s[:r], Vt[:r]))
