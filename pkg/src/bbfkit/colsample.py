"""Alternating row/column importance sampling on a virtual matrix.

Selects r important columns and r+l important rows of an m x n matrix that
is only available through a block accessor, touching O(r(m+n)) entries:
pivoted QR on uniformly sampled rows proposes columns, pivoted LQ on those
columns proposes rows, and one refresh round firms up the columns.
"""

import numpy as np
from dataclasses import dataclass

from .rla import pivot_columns_qr, pivot_rows_lq


@dataclass
class SampleResult:
    """Index sets chosen from the virtual matrix (all local indices)."""

    important_cols: np.ndarray
    important_rows: np.ndarray
    uniform_rows_used: np.ndarray
    uniform_cols_used: np.ndarray


def pad_to_size(parts, target, pool_size, rng):
    """Dedup the concatenation of ``parts`` keeping first occurrences, pad
    with fresh uniform draws from range(pool_size) excluding existing ones,
    and truncate to exactly ``target`` entries."""
    seen = set()
    out = []
    for part in parts:
        for idx in np.asarray(part, dtype=np.intp):
            i = int(idx)
            if i not in seen:
                seen.add(i)
                out.append(i)
    if len(out) < target:
        remaining = np.setdiff1d(np.arange(pool_size, dtype=np.intp), out)
        extra = rng.permutation(remaining)[: target - len(out)]
        out.extend(int(i) for i in extra)
    return np.asarray(out[:target], dtype=np.intp)


def _uniform(pool_size, count, rng):
    if count <= 0:
        return np.empty(0, dtype=np.intp)
    return rng.choice(pool_size, size=min(count, pool_size), replace=False).astype(
        np.intp
    )


def sample_columns(acc, r, l, seed=0):
    """Run the three-step alternating sampler on the accessor's matrix.

    Returns r important columns and min(m, r+l) important rows. Every set
    union is deduplicated and padded with fresh uniform draws to a fixed
    size, so downstream shapes are static. When the matrix has fewer rows
    than a step wants, that step degrades to using all rows.
    """
    m, n = acc.shape
    if r < 1:
        raise ValueError("need r >= 1")
    if r > n:
        raise ValueError(f"cannot select {r} columns from {n}")
    rng = np.random.default_rng(seed)
    all_cols = np.arange(n, dtype=np.intp)

    # Step 1: uniform rows propose important columns.
    rows_u1 = _uniform(m, r, rng)
    pi_c = pivot_columns_qr(acc.block(rows_u1, all_cols), r)

    # Step 2: widen the column set, then rank rows against it.
    cols_u = _uniform(n, l, rng)
    cols2 = pad_to_size([pi_c, cols_u], min(n, r + l), n, rng)
    block2 = acc.block(np.arange(m, dtype=np.intp), cols2)
    pr = pivot_rows_lq(block2, min(m, r + l))

    # Step 3: refresh rows with l uniforms (kept ahead of the pivots so they
    # survive truncation), then recompute the important columns.
    rows_u3 = _uniform(m, l, rng)
    rows3 = pad_to_size([rows_u3, pr], min(m, r + l), m, rng)
    pi_c = pivot_columns_qr(acc.block(rows3, all_cols), r)

    return SampleResult(
        important_cols=pi_c,
        important_rows=rows3,
        uniform_rows_used=np.concatenate([rows_u1, rows_u3]),
        uniform_cols_used=cols_u,
    )
