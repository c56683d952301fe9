"""Error metrics and spectral diagnostics for kernel approximations."""

import numpy as np
import scipy.linalg as sla
from dataclasses import dataclass

from .baselines import _leverage_from_eig
from .kernels import KernelAccessor, kernel_cross

DENSE_CAP = 8192


@dataclass
class SpectralStats:
    """Summary statistics of a dense kernel matrix at a reference rank r."""

    stable_rank: int
    eig_ratio: float
    frob_capture: float
    scaled_leverage: float
    r: int
    inv_h2: float


def _as_dense(obj, n=None):
    if isinstance(obj, np.ndarray):
        return obj
    if hasattr(obj, "reconstruct_dense"):
        return obj.reconstruct_dense(max_n=max(DENSE_CAP, n or 0))
    if hasattr(obj, "dense"):
        return obj.dense()
    if isinstance(obj, KernelAccessor):
        n = obj.shape[0]
        idx = np.arange(n, dtype=np.intp)
        return obj.block(idx, idx)
    raise TypeError(f"cannot densify {type(obj).__name__}")


def _entry_fn(obj):
    if isinstance(obj, np.ndarray):
        return lambda a, b: obj[a, b]
    if hasattr(obj, "entries_at"):
        return obj.entries_at
    if hasattr(obj, "pairs"):
        return obj.pairs
    raise TypeError(f"cannot sample entries of {type(obj).__name__}")


def relative_error(k_hat, k_exact, mode="dense", budget=None, seed=0, dense_cap=DENSE_CAP):
    """Relative Frobenius error |K_hat - K|_F / |K|_F.

    dense mode computes the exact ratio (desk scale only) and returns a
    float. sampled mode estimates numerator and denominator from one
    uniform entry sample of size ``budget`` and returns the estimate with
    a delta-method standard error, as ``(estimate, stderr)``.
    """
    if mode == "dense":
        K = _as_dense(k_exact)
        if K.shape[0] > dense_cap:
            raise ValueError(f"n = {K.shape[0]} exceeds the dense cap {dense_cap}")
        Khat = _as_dense(k_hat, n=K.shape[0])
        return float(np.linalg.norm(Khat - K) / np.linalg.norm(K))
    if mode != "sampled":
        raise ValueError("mode must be 'dense' or 'sampled'")

    hat_fn = _entry_fn(k_hat)
    exact_fn = _entry_fn(k_exact)
    if hasattr(k_exact, "shape"):
        n = k_exact.shape[0]
    else:
        n = k_hat.n
    if budget is None:
        budget = 100 * n
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=budget)
    b = rng.integers(0, n, size=budget)
    exact_vals = np.asarray(exact_fn(a, b))
    diff2 = (np.asarray(hat_fn(a, b)) - exact_vals) ** 2
    ref2 = exact_vals**2
    mean_d = float(diff2.mean())
    mean_k = float(ref2.mean())
    ratio = mean_d / mean_k
    est = float(np.sqrt(ratio))
    # Delta-method variance for sqrt(mean_d / mean_k) with a shared sample.
    m = budget
    var_d = float(diff2.var(ddof=1)) / m
    var_k = float(ref2.var(ddof=1)) / m
    cov = float(np.cov(diff2, ref2, ddof=1)[0, 1]) / m
    if mean_d > 0:
        var_ratio = ratio**2 * (
            var_d / mean_d**2 + var_k / mean_k**2 - 2 * cov / (mean_d * mean_k)
        )
        se = float(np.sqrt(max(var_ratio, 0.0)) / (2 * est)) if est > 0 else 0.0
    else:
        se = 0.0
    return est, se


def spectral_stats(X, spec, r, dense_cap=DENSE_CAP):
    """Stable rank, eigenvalue ratio at r, Frobenius capture of the best
    rank-r approximation (percent), and the scaled r-th leverage score,
    all from the exact dense kernel matrix."""
    n = X.n
    if n > dense_cap:
        raise ValueError(f"n = {n} exceeds the dense cap {dense_cap}")
    if not 1 <= r < n:
        raise ValueError(f"reference rank must be in [1, {n - 1}]")
    K = kernel_cross(spec, X.points, X.points)
    w, V = sla.eigh(K)
    lam = np.maximum(w[::-1], 0.0)
    frob2 = float((K**2).sum())
    stable_rank = int(np.ceil(frob2 / lam[0] ** 2))
    eig_ratio = float(lam[r] / lam[r - 1]) if lam[r - 1] > 0 else 0.0
    frob_capture = float(100.0 * np.sqrt(np.sum(lam[:r] ** 2) / frob2))
    lev = _leverage_from_eig(w, V, r)
    scaled_leverage = float(np.sort(lev)[::-1][r - 1] * (n / r))
    return SpectralStats(
        stable_rank=stable_rank,
        eig_ratio=min(max(eig_ratio, 0.0), 1.0),
        frob_capture=frob_capture,
        scaled_leverage=scaled_leverage,
        r=int(r),
        inv_h2=float(1.0 / spec.h**2),
    )
