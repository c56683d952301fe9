"""Point-set loading, standardization, and synthetic blob generation."""

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class DataMatrix:
    """n points in d dimensions, one row per point, plus standardization state."""

    points: np.ndarray
    standardized: bool = False
    feature_means: np.ndarray = field(default=None)
    feature_stds: np.ndarray = field(default=None)

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-d array (rows are points)")
        if pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError("need at least one point and one dimension")
        if not np.isfinite(pts).all():
            raise ValueError("points contain non-finite entries")
        self.points = pts
        if self.feature_means is None:
            self.feature_means = np.zeros(pts.shape[1])
        if self.feature_stds is None:
            self.feature_stds = np.ones(pts.shape[1])

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def load_csv(path, has_header=False, drop_columns=()):
    """Read a plain numeric CSV into a DataMatrix.

    Comma delimiter, '.' decimal point, no quoting. ``drop_columns`` are
    0-based indices into the original columns; dropped fields are never
    parsed, so label columns may be non-numeric. Errors name the offending
    file line (1-based, header counted) and column.
    """
    drop = {int(c) for c in drop_columns}
    rows = []
    arity = None
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            if lineno == 1 and has_header:
                continue
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            if arity is None:
                arity = len(fields)
            elif len(fields) != arity:
                raise ValueError(
                    f"{path}: row {lineno} has {len(fields)} fields, expected {arity}"
                )
            vals = []
            for j, tok in enumerate(fields):
                if j in drop:
                    continue
                try:
                    v = float(tok)
                except ValueError:
                    raise ValueError(
                        f"{path}: row {lineno}, column {j + 1}: "
                        f"cannot parse {tok.strip()!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise ValueError(
                        f"{path}: row {lineno}, column {j + 1}: non-finite value"
                    )
                vals.append(v)
            if not vals:
                raise ValueError(f"{path}: row {lineno}: all columns dropped")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return DataMatrix(np.array(rows, dtype=np.float64))


def standardize(X):
    """Return a copy with each feature shifted to mean 0 and scaled to std 1.

    Uses the unbiased (n-1) std. Constant columns map to zeros and their
    std is recorded as 1 so the stored transform stays invertible.
    """
    if X.standardized:
        raise ValueError("data is already standardized")
    pts = X.points
    means = pts.mean(axis=0)
    if X.n > 1:
        stds = pts.std(axis=0, ddof=1)
    else:
        stds = np.zeros(X.d)
    constant = (pts.max(axis=0) - pts.min(axis=0)) == 0.0
    stds = np.where(constant, 1.0, stds)
    out = (pts - means) / stds
    out[:, constant] = 0.0
    return DataMatrix(out, standardized=True, feature_means=means, feature_stds=stds)


def synth_blobs(n, d, num_centers, spread, seed):
    """Sample n points around num_centers Gaussian blobs in the unit cube.

    Centers are drawn uniformly in [0,1]^d first, then one isotropic normal
    displacement of scale ``spread`` per point; point i belongs to center
    i % num_centers (round-robin). Fully determined by the arguments.
    """
    if num_centers < 1 or n < num_centers:
        raise ValueError("need n >= num_centers >= 1")
    if spread <= 0:
        raise ValueError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.random((num_centers, d))
    labels = np.arange(n) % num_centers
    pts = centers[labels] + spread * rng.standard_normal((n, d))
    return DataMatrix(pts)
