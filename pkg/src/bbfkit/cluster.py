"""k-means and farthest-point k-center partitioning, plus the cluster permutation."""

import numpy as np
from dataclasses import dataclass
from scipy.spatial.distance import cdist

_MOVE_TOL = 1e-6


@dataclass
class Clustering:
    """A partition of n points into k nonempty clusters.

    ``permutation[p]`` is the original index of the point at permuted
    position p; positions are grouped by cluster id and keep the original
    order within each cluster. ``radii`` are l2 distances to the center.
    """

    k: int
    assignment: np.ndarray
    centers: np.ndarray
    sizes: np.ndarray
    radii: np.ndarray
    permutation: np.ndarray

    @property
    def n(self):
        return self.assignment.shape[0]

    @property
    def offsets(self):
        return np.concatenate(([0], np.cumsum(self.sizes)))

    def members(self, i):
        """Original indices of cluster i, in permuted (stable) order."""
        off = self.offsets
        return self.permutation[off[i] : off[i + 1]]


def _finalize(points, assignment, centers):
    k = centers.shape[0]
    sizes = np.bincount(assignment, minlength=k)
    if (sizes == 0).any():
        raise RuntimeError("internal error: empty cluster survived repair")
    permutation = np.argsort(assignment, kind="stable")
    dist = np.linalg.norm(points - centers[assignment], axis=1)
    radii = np.zeros(k)
    np.maximum.at(radii, assignment, dist)
    return Clustering(
        k=k,
        assignment=assignment.astype(np.intp),
        centers=centers,
        sizes=sizes,
        radii=radii,
        permutation=permutation.astype(np.intp),
    )


def _farthest_point_indices(points, k, rng):
    """Gonzalez traversal: seed uniformly, then repeatedly take the point
    farthest from the chosen set. Returns k distinct indices."""
    n = points.shape[0]
    first = int(rng.integers(n))
    chosen = [first]
    mind = np.linalg.norm(points - points[first], axis=1)
    mind[first] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(points - points[nxt], axis=1))
        mind[nxt] = -np.inf
    return np.array(chosen, dtype=np.intp)


def _assign(points, centers):
    d2 = cdist(points, centers, "sqeuclidean")
    # np.argmin breaks ties toward the lowest index, keeping results
    # independent of any internal parallelism.
    return np.argmin(d2, axis=1), d2


def _repair_empty(points, assignment, centers, d2):
    """Give each empty cluster the point currently farthest from its center.

    Replacing an unused center and re-assigning can only lower every
    point's distance, so the k-means objective stays monotone.
    """
    k = centers.shape[0]
    guard = 0
    while True:
        sizes = np.bincount(assignment, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return assignment, centers, d2
        guard += 1
        cur = d2[np.arange(points.shape[0]), assignment]
        far = int(np.argmax(cur))
        centers = centers.copy()
        centers[empty[0]] = points[far]
        if guard <= k:
            assignment, d2 = _assign(points, centers)
        else:
            # Degenerate duplicate-heavy data: force the move instead of
            # re-running the assignment, which is guaranteed to terminate.
            assignment = assignment.copy()
            assignment[far] = empty[0]


def kmeans(X, k, seed=0, max_iter=100):
    """Lloyd iteration from farthest-point-seeded centers.

    Stops after max_iter rounds or when the total centroid movement drops
    below 1e-6 of the data diameter. The squared-distance objective is
    asserted nonincreasing across iterations.
    """
    points = X.points
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centers = points[_farthest_point_indices(points, k, rng)].copy()
    diam = float(np.linalg.norm(points.max(axis=0) - points.min(axis=0))) or 1.0

    prev_obj = np.inf
    for _ in range(max_iter):
        assignment, d2 = _assign(points, centers)
        assignment, centers, d2 = _repair_empty(points, assignment, centers, d2)
        obj = float(d2[np.arange(n), assignment].sum())
        assert obj <= prev_obj * (1 + 1e-12) + 1e-12, "k-means objective increased"
        prev_obj = obj
        sizes = np.bincount(assignment, minlength=k)
        new_centers = np.empty_like(centers)
        for j in range(points.shape[1]):
            new_centers[:, j] = np.bincount(
                assignment, weights=points[:, j], minlength=k
            )
        new_centers /= sizes[:, None]
        move = float(np.linalg.norm(new_centers - centers, axis=1).sum())
        centers = new_centers
        if move < _MOVE_TOL * diam:
            break
    assignment, d2 = _assign(points, centers)
    assignment, centers, d2 = _repair_empty(points, assignment, centers, d2)
    return _finalize(points, assignment, centers)


def kcenter_farthest(X, k, seed=0):
    """Gonzalez farthest-point clustering, a 2-approximation for k-center.

    Centers are actual data points; the first is drawn uniformly by seed.
    """
    points = X.points
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    idx = _farthest_point_indices(points, k, rng)
    centers = points[idx].copy()
    assignment, _ = _assign(points, centers)
    # A chosen center always owns itself; this only matters when duplicate
    # points were picked as centers and would otherwise leave one empty.
    assignment[idx] = np.arange(k)
    return _finalize(points, assignment, centers)


def permute_vector(c, v, direction="forward"):
    """Apply the cluster permutation P (forward) or its inverse P^T."""
    v = np.asarray(v)
    if v.shape[0] != c.permutation.shape[0]:
        raise ValueError("vector length does not match clustering")
    if direction == "forward":
        return v[c.permutation]
    if direction == "inverse":
        out = np.empty_like(v)
        out[c.permutation] = v
        return out
    raise ValueError("direction must be 'forward' or 'inverse'")
