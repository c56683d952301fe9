"""Block basis factorization of kernel matrices.

The factorization stores, per cluster, an orthonormal basis for the
interaction between that cluster and the whole point set, plus a k x k grid
of small inner blocks coupling the bases. Off-diagonal blocks whose entries
are provably below the error budget are skipped. Construction touches
O(n k r^2) kernel entries and never materializes the full matrix; applying
the result to a vector costs O(n r).
"""

import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .cluster import Clustering, kcenter_farthest, kmeans
from .colsample import pad_to_size, sample_columns
from .kernels import (
    GAUSSIAN,
    LAPLACIAN,
    KernelAccessor,
    KernelSpec,
    envelope,
    metric_distance,
    metric_radius,
)
from .rla import exact_svd, pinv_truncated, randomized_svd

DEFAULT_RMAX = 300
DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITER = 2

_SEED_MOD = 2**63
_TAG_FROB = 101
_TAG_RANKS = 102
_TAG_SAMPLE = 103
_TAG_BASIS = 104
_TAG_INNER = 105
_TAG_SELECT = 106


def derive_seed(seed, *keys):
    """Stable child seed from a base seed and integer keys; independent of
    call order, so parallel schedules cannot change results."""
    entropy = [int(seed) % _SEED_MOD] + [int(k) % _SEED_MOD for k in keys]
    ss = np.random.SeedSequence(entropy)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def derived_rng(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))


@dataclass
class RankProfile:
    """Per-cluster ranks meeting the tail criterion at accuracy epsilon.

    ``frob_estimate`` holds the estimated squared Frobenius norm of the
    full matrix; ``accuracy_risk[i]`` flags clusters where the rank cap was
    reached before the tail criterion was met.
    """

    epsilon: float
    ranks: np.ndarray
    r_max: int
    sigma_profiles: list
    frob_estimate: float
    accuracy_risk: np.ndarray
    sizes: np.ndarray


@dataclass
class SkipCertificate:
    """Evidence recorded when an off-diagonal block is skipped."""

    distance_lower_bound: float
    envelope_value: float
    threshold: float


def estimate_frobenius(acc, n, sample_size, seed=0):
    """Unbiased estimate of the squared Frobenius norm of the kernel matrix.

    Unit diagonal entries are handled exactly; only off-diagonal pairs are
    sampled (uniformly, with replacement). A sample budget covering all
    off-diagonal pairs switches to the exact sum.
    """
    if sample_size < 1:
        raise ValueError("sample_size must be >= 1")
    if n == 1:
        return 1.0
    total_off = n * (n - 1)
    if sample_size >= total_off:
        total = 0.0
        all_cols = np.arange(n, dtype=np.intp)
        for start in range(0, n, 1024):
            rows = np.arange(start, min(start + 1024, n), dtype=np.intp)
            total += float((acc.block(rows, all_cols) ** 2).sum())
        return total
    rng = np.random.default_rng(seed)
    a = rng.integers(0, n, size=sample_size)
    b = rng.integers(0, n - 1, size=sample_size)
    b = b + (b >= a)
    vals = acc.pairs(a, b)
    return total_off * float(np.mean(vals**2)) + n


def _block_frobenius(acc, members, block, rng):
    """Squared Frobenius mass of one diagonal block, exact at desk scale."""
    n_i = members.size
    if n_i <= 1000:
        if block is not None and block.shape == (n_i, n_i):
            return float((block**2).sum())
        return float((acc.block(members, members) ** 2).sum())
    budget = 100 * n_i
    a_loc = rng.integers(0, n_i, size=budget)
    b_loc = rng.integers(0, n_i - 1, size=budget)
    b_loc = b_loc + (b_loc >= a_loc)
    vals = acc.pairs(members[a_loc], members[b_loc])
    return n_i * (n_i - 1) * float(np.mean(vals**2)) + n_i


DEFAULT_SPECTRA_CAP = 4096
DEFAULT_RANK_SAFETY = 0.4


def estimate_ranks(
    X,
    spec,
    clustering,
    epsilon,
    r_max=DEFAULT_RMAX,
    seed=0,
    oversample=DEFAULT_OVERSAMPLE,
    acc=None,
    frob_estimate=None,
    spectra_cap=DEFAULT_SPECTRA_CAP,
    rank_safety=DEFAULT_RANK_SAFETY,
):
    """Choose per-cluster ranks so every diagonal block fits its share of
    the squared-error budget epsilon^2 * ||M||_F^2.

    For clusters up to ``spectra_cap`` points, the singular values of the
    diagonal block come from a randomized SVD of the materialized block
    (exact when the rank cap covers it). Larger clusters fall back to a
    uniform column subsample rescaled by sqrt(n_i / s), which keeps the
    cost linear but only estimates the head of the spectrum. The returned
    rank is the smallest r with tail mass below
    (n_i / n)^2 * ||M||_F^2 * (rank_safety * epsilon)^2, floored at 1 and
    capped at r_max.

    ``rank_safety`` shrinks the tail budget: the diagonal-block criterion
    ignores what the shared basis loses on off-diagonal blocks and what the
    subsampled basis/inner-block construction adds, so ranks sized for the
    full budget overshoot the target error by 3-5x. Reserving headroom here
    keeps the end-to-end error within a small multiple of epsilon.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if not 0.0 < rank_safety <= 1.0:
        raise ValueError("rank_safety must lie in (0, 1]")
    n = X.n
    if acc is None:
        acc = KernelAccessor(X, spec)
    if frob_estimate is None:
        budget = min(100 * n, n * (n - 1)) if n > 1 else 1
        frob_estimate = estimate_frobenius(
            acc, n, max(budget, 1), seed=derive_seed(seed, _TAG_FROB)
        )
    k = clustering.k
    ranks = np.zeros(k, dtype=np.intp)
    risk = np.zeros(k, dtype=bool)
    profiles = []
    for i in range(k):
        members = clustering.members(i)
        n_i = members.size
        cap = max(1, min(r_max, n_i))
        rng_i = derived_rng(seed, _TAG_RANKS, i)
        if n_i <= spectra_cap:
            block = acc.block(members, members)
            if cap + oversample >= n_i:
                sv = sla.svd(block, compute_uv=False)[:cap]
            else:
                sv = randomized_svd(
                    block, cap, l=oversample, q=2,
                    seed=derive_seed(seed, _TAG_RANKS, i),
                ).S
            bf2 = float((block**2).sum())
        else:
            s = min(n_i, cap + oversample)
            cols = members[rng_i.choice(n_i, size=s, replace=False)]
            block = acc.block(members, cols)
            sv = sla.svd(block, compute_uv=False)[:cap] * np.sqrt(n_i / s)
            bf2 = _block_frobenius(acc, members, None, rng_i)
        tail = np.maximum(bf2 - np.cumsum(sv**2), 0.0)
        thr = (n_i / n) ** 2 * frob_estimate * (rank_safety * epsilon) ** 2
        hit = np.flatnonzero(tail < thr)
        if hit.size:
            ranks[i] = hit[0] + 1
        else:
            ranks[i] = cap
            risk[i] = True
        profiles.append(sv)
    return RankProfile(
        epsilon=float(epsilon),
        ranks=ranks,
        r_max=int(r_max),
        sigma_profiles=profiles,
        frob_estimate=float(frob_estimate),
        accuracy_risk=risk,
        sizes=clustering.sizes.copy(),
    )


def fixed_rank_profile(clustering, rank, epsilon, frob_estimate):
    """Profile with one prescribed rank for every cluster (clamped to n_i)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    ranks = np.minimum(rank, clustering.sizes).astype(np.intp)
    return RankProfile(
        epsilon=float(epsilon),
        ranks=ranks,
        r_max=int(rank),
        sigma_profiles=[np.empty(0) for _ in range(clustering.k)],
        frob_estimate=float(frob_estimate),
        accuracy_risk=np.zeros(clustering.k, dtype=bool),
        sizes=clustering.sizes.copy(),
    )


def memory_cost(profile, skipped=()):
    """Stored scalars: sum n_i r_i for bases plus r_i r_j per kept block."""
    ranks = np.asarray(profile.ranks, dtype=np.float64)
    base = float(np.dot(profile.sizes, ranks))
    total = float(ranks.sum()) ** 2
    for i, j in skipped:
        total -= float(ranks[i] * ranks[j])
    return base + total


_PARTITIONERS = {"kmeans": kmeans, "kcenter": kcenter_farthest}


def select_k(
    X,
    spec,
    epsilon,
    k_min,
    k_max,
    seed=0,
    r_max=DEFAULT_RMAX,
    oversample=DEFAULT_OVERSAMPLE,
    partitioner="kmeans",
    acc=None,
    spectra_cap=DEFAULT_SPECTRA_CAP,
    rank_safety=DEFAULT_RANK_SAFETY,
):
    """Pick the cluster count minimizing the BBF memory footprint.

    Runs a memoized integer ternary search over [k_min, k_max] (O(log n)
    clustering + rank-estimation evaluations); if the evaluated points
    reveal a non-unimodal profile, falls back to an exhaustive scan.
    Returns the best evaluated (k, profile, clustering).
    """
    n = X.n
    if k_min < 1 or k_max < k_min:
        raise ValueError("need 1 <= k_min <= k_max")
    if k_max > int(np.ceil(np.sqrt(n))):
        raise ValueError(f"k_max {k_max} exceeds ceil(sqrt(n)) = {int(np.ceil(np.sqrt(n)))}")
    part = _PARTITIONERS[partitioner] if isinstance(partitioner, str) else partitioner
    if acc is None:
        acc = KernelAccessor(X, spec)
    budget = min(100 * n, n * (n - 1)) if n > 1 else 1
    frob_estimate = estimate_frobenius(
        acc, n, max(budget, 1), seed=derive_seed(seed, _TAG_FROB)
    )

    cache = {}

    def evaluate(k):
        if k not in cache:
            ds = derive_seed(seed, _TAG_SELECT, k)
            c = part(X, k, seed=ds)
            prof = estimate_ranks(
                X,
                spec,
                c,
                epsilon,
                r_max=r_max,
                seed=ds,
                oversample=oversample,
                acc=acc,
                frob_estimate=frob_estimate,
                spectra_cap=spectra_cap,
                rank_safety=rank_safety,
            )
            cache[k] = (memory_cost(prof), prof, c)
        return cache[k][0]

    lo, hi = k_min, k_max
    while hi - lo > 3:
        m1 = lo + (hi - lo) // 3
        m2 = hi - (hi - lo) // 3
        if evaluate(m1) <= evaluate(m2):
            hi = m2
        else:
            lo = m1
    for k in range(lo, hi + 1):
        evaluate(k)

    ks = sorted(cache)
    fs = [cache[k][0] for k in ks]
    non_unimodal = any(
        fs[t - 1] < fs[t] and fs[t] > fs[t + 1] for t in range(1, len(fs) - 1)
    )
    if non_unimodal:
        for k in range(k_min, k_max + 1):
            evaluate(k)

    best = min(cache, key=lambda k: (cache[k][0], k))
    return best, cache[best][1], cache[best][2]


def inner_from_samples(U_rows, block, V_rows, rel_tol=1e-10):
    """Recover the inner matrix C of M = U C V^T from sampled rows/columns:
    C = pinv(U(I,:)) M(I,J) pinv(V(J,:)^T). Exact whenever both sampled
    factors have full column rank."""
    return pinv_truncated(U_rows, rel_tol) @ block @ pinv_truncated(V_rows.T, rel_tol)


class BBFactorization:
    """Permutation + per-cluster bases + inner-block grid; see build_bbf."""

    def __init__(
        self,
        clustering,
        spec,
        bases,
        inner,
        epsilon,
        frob_estimate,
        skip_certificates=None,
        build_entries=0,
    ):
        self.clustering = clustering
        self.spec = spec
        self.bases = bases
        self.inner = inner
        self.epsilon = float(epsilon)
        self.frob_estimate = float(frob_estimate)
        self.skip_certificates = skip_certificates or {}
        self.build_entries = int(build_entries)
        self._pos = np.argsort(clustering.permutation)

    @property
    def n(self):
        return self.clustering.n

    @property
    def k(self):
        return self.clustering.k

    @property
    def ranks(self):
        return np.array([U.shape[1] for U in self.bases], dtype=np.intp)

    def memory_count(self):
        ranks = self.ranks
        total = float(np.dot(self.clustering.sizes, ranks))
        for i in range(self.k):
            for j in range(self.k):
                if self.inner[i][j] is not None:
                    total += float(ranks[i] * ranks[j])
        return total

    def apply(self, v):
        """Matrix-vector product with the factorized kernel, O(n r) time."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ValueError(f"expected a length-{self.n} vector")
        perm = self.clustering.permutation
        off = self.clustering.offsets
        vp = v[perm]
        w = [
            self.bases[j].T @ vp[off[j] : off[j + 1]] for j in range(self.k)
        ]
        out = np.empty(self.n)
        for i in range(self.k):
            z = np.zeros(self.bases[i].shape[1])
            for j in range(self.k):
                C = self.inner[i][j]
                if C is not None:
                    z += C @ w[j]
            out[off[i] : off[i + 1]] = self.bases[i] @ z
        y = np.empty(self.n)
        y[perm] = out
        return y

    def reconstruct_dense(self, max_n=8192):
        """Dense n x n reconstruction (testing and diagnostics only)."""
        if self.n > 20000:
            raise ValueError(f"n = {self.n} refused for dense reconstruction")
        if self.n > max_n:
            raise ValueError(f"n = {self.n} exceeds the dense cap {max_n}")
        off = self.clustering.offsets
        M = np.zeros((self.n, self.n))
        for i in range(self.k):
            for j in range(self.k):
                C = self.inner[i][j]
                if C is not None:
                    M[off[i] : off[i + 1], off[j] : off[j + 1]] = (
                        self.bases[i] @ C @ self.bases[j].T
                    )
        return M[np.ix_(self._pos, self._pos)]

    def entries_at(self, rows, cols):
        """Entrywise values of the approximation at paired original indices."""
        rows = np.asarray(rows, dtype=np.intp)
        cols = np.asarray(cols, dtype=np.intp)
        if rows.shape != cols.shape:
            raise ValueError("paired index vectors must have equal length")
        off = self.clustering.offsets
        pr = self._pos[rows]
        pc = self._pos[cols]
        bi = np.searchsorted(off, pr, side="right") - 1
        bj = np.searchsorted(off, pc, side="right") - 1
        out = np.zeros(rows.size)
        for key in set(zip(bi.tolist(), bj.tolist())):
            i, j = key
            mask = (bi == i) & (bj == j)
            C = self.inner[i][j]
            if C is None:
                continue
            Ur = self.bases[i][pr[mask] - off[i]]
            Vc = self.bases[j][pc[mask] - off[j]]
            out[mask] = np.einsum("tr,rs,ts->t", Ur, C, Vc)
        return out


def build_bbf(
    X,
    spec,
    clustering,
    profile,
    l=DEFAULT_OVERSAMPLE,
    seed=0,
    q=DEFAULT_POWER_ITER,
    acc=None,
):
    """Construct a BBFactorization without materializing the kernel matrix.

    Per cluster: the column sampler proposes r_i + l columns of the
    cluster's row-submatrix, and the basis is the top-r_i left factor of
    that thin block. Clusters smaller than r_i + l fall back to an exact
    SVD of their materialized rows. Per block pair: either the
    envelope-based cutoff certifies the block negligible and it is skipped,
    or its inner matrix is recovered from sampled rows and columns and the
    transpose is mirrored.
    """
    n = X.n
    k = clustering.k
    ranks = np.asarray(profile.ranks, dtype=np.intp)
    if np.any(ranks < 1) or np.any(ranks > clustering.sizes):
        raise ValueError("profile ranks must satisfy 1 <= r_i <= n_i")
    if acc is None:
        acc = KernelAccessor(X, spec)
    entries_before = acc.entries_evaluated
    perm = clustering.permutation
    members = [clustering.members(i) for i in range(k)]

    bases = []
    pi_rows = []
    for i in range(k):
        n_i = members[i].size
        r_i = int(ranks[i])
        if n_i < r_i + l:
            block = acc.block(members[i], perm)
            U = exact_svd(block).U[:, :r_i]
            rows_imp = np.arange(n_i, dtype=np.intp)
        else:
            sub = acc.restrict(members[i], perm)
            sres = sample_columns(sub, r_i, l, seed=derive_seed(seed, _TAG_SAMPLE, i))
            rng_b = derived_rng(seed, _TAG_BASIS, i)
            cols = pad_to_size([sres.important_cols], min(n, r_i + l), n, rng_b)
            block = sub.block(np.arange(n_i, dtype=np.intp), cols)
            res = randomized_svd(
                block, r_i, l=l, q=q, seed=derive_seed(seed, _TAG_BASIS, i, 1)
            )
            U = res.U
            rows_imp = sres.important_rows
        bases.append(U)
        pi_rows.append(rows_imp)

    threshold = np.sqrt(profile.frob_estimate) * profile.epsilon / n
    inner = [[None] * k for _ in range(k)]
    certificates = {}
    for i in range(k):
        n_i = members[i].size
        r_i = int(ranks[i])
        for j in range(i, k):
            n_j = members[j].size
            r_j = int(ranks[j])
            if i != j:
                dist = metric_distance(
                    spec, clustering.centers[i], clustering.centers[j]
                )
                bound = max(
                    0.0,
                    dist
                    - metric_radius(spec, clustering.radii[i], X.d)
                    - metric_radius(spec, clustering.radii[j], X.d),
                )
                env = envelope(spec, bound)
                if env <= threshold:
                    certificates[(i, j)] = SkipCertificate(bound, env, threshold)
                    continue
            rng_ij = derived_rng(seed, _TAG_INNER, i, j)
            gam_r = rng_ij.choice(n_i, size=min(r_i, n_i), replace=False)
            I = pad_to_size([pi_rows[i], gam_r], min(n_i, 2 * r_i + l), n_i, rng_ij)
            gam_c = rng_ij.choice(n_j, size=min(r_j, n_j), replace=False)
            J = pad_to_size([pi_rows[j], gam_c], min(n_j, 2 * r_j + l), n_j, rng_ij)
            MIJ = acc.block(members[i][I], members[j][J])
            C = inner_from_samples(bases[i][I], MIJ, bases[j][J])
            if i == j:
                C = 0.5 * (C + C.T)
                inner[i][i] = C
            else:
                inner[i][j] = C
                inner[j][i] = C.T.copy()

    return BBFactorization(
        clustering=clustering,
        spec=spec,
        bases=bases,
        inner=inner,
        epsilon=profile.epsilon,
        frob_estimate=profile.frob_estimate,
        skip_certificates=certificates,
        build_entries=acc.entries_evaluated - entries_before,
    )


_MAGIC = b"BBFC"
_VERSION = 1
_FAMILY_CODES = {GAUSSIAN: 0, LAPLACIAN: 1}
_FAMILY_NAMES = {v: k for k, v in _FAMILY_CODES.items()}


def save_bbf(f, path):
    """Write the factorization to a versioned binary container."""
    k = f.k
    sizes = f.clustering.sizes
    ranks = f.ranks
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IB", _VERSION, _FAMILY_CODES[f.spec.family]))
        fh.write(
            struct.pack(
                "<dddqqq",
                f.spec.h,
                f.epsilon,
                f.frob_estimate,
                f.n,
                f.clustering.centers.shape[1],
                k,
            )
        )
        fh.write(f.clustering.permutation.astype("<i8").tobytes())
        fh.write(sizes.astype("<i8").tobytes())
        fh.write(ranks.astype("<i8").tobytes())
        fh.write(f.clustering.centers.astype("<f8").tobytes())
        fh.write(f.clustering.radii.astype("<f8").tobytes())
        flags = np.array(
            [[f.inner[i][j] is not None for j in range(k)] for i in range(k)],
            dtype=np.uint8,
        )
        fh.write(flags.tobytes())
        for i in range(k):
            fh.write(np.ascontiguousarray(f.bases[i], dtype="<f8").tobytes())
        for i in range(k):
            for j in range(i, k):
                if f.inner[i][j] is not None:
                    fh.write(np.ascontiguousarray(f.inner[i][j], dtype="<f8").tobytes())


def _read_exact(fh, count):
    buf = fh.read(count)
    if len(buf) != count:
        raise ValueError("truncated factorization container")
    return buf


def load_bbf(path):
    """Read a factorization container written by save_bbf."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != _MAGIC:
            raise ValueError(f"{path}: not a BBF container")
        version, fam = struct.unpack("<IB", _read_exact(fh, 5))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        if fam not in _FAMILY_NAMES:
            raise ValueError(f"{path}: unknown kernel family code {fam}")
        h, epsilon, frob_estimate, n, d, k = struct.unpack(
            "<dddqqq", _read_exact(fh, 48)
        )
        perm = np.frombuffer(_read_exact(fh, 8 * n), dtype="<i8").astype(np.intp)
        sizes = np.frombuffer(_read_exact(fh, 8 * k), dtype="<i8").astype(np.intp)
        ranks = np.frombuffer(_read_exact(fh, 8 * k), dtype="<i8").astype(np.intp)
        centers = np.frombuffer(_read_exact(fh, 8 * k * d), dtype="<f8").reshape(k, d)
        radii = np.frombuffer(_read_exact(fh, 8 * k), dtype="<f8").copy()
        flags = np.frombuffer(_read_exact(fh, k * k), dtype=np.uint8).reshape(k, k)
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        assignment = np.empty(n, dtype=np.intp)
        for i in range(k):
            assignment[perm[offsets[i] : offsets[i + 1]]] = i
        clustering = Clustering(
            k=int(k),
            assignment=assignment,
            centers=centers.copy(),
            sizes=sizes,
            radii=radii,
            permutation=perm,
        )
        bases = []
        for i in range(k):
            n_i, r_i = int(sizes[i]), int(ranks[i])
            buf = _read_exact(fh, 8 * n_i * r_i)
            bases.append(np.frombuffer(buf, dtype="<f8").reshape(n_i, r_i).copy())
        inner = [[None] * k for _ in range(k)]
        for i in range(k):
            for j in range(i, k):
                if flags[i, j]:
                    r_i, r_j = int(ranks[i]), int(ranks[j])
                    buf = _read_exact(fh, 8 * r_i * r_j)
                    C = np.frombuffer(buf, dtype="<f8").reshape(r_i, r_j).copy()
                    inner[i][j] = C
                    if i != j:
                        inner[j][i] = C.T.copy()
        spec = KernelSpec(_FAMILY_NAMES[fam], h)
    return BBFactorization(
        clustering=clustering,
        spec=spec,
        bases=bases,
        inner=inner,
        epsilon=epsilon,
        frob_estimate=frob_estimate,
    )
