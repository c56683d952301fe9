import os
import sys

import numpy as np
import pytest

import bbfkit as bk

ABALONE_ENV = "BBF_ABALONE"
ABALONE_DEFAULT = os.path.join(os.path.dirname(__file__), "..", "data", "abalone.csv")


def abalone_path():
    return os.environ.get(ABALONE_ENV, ABALONE_DEFAULT)


def require_abalone():
    path = abalone_path()
    if not os.path.exists(path):
        pytest.skip(
            "abalone dataset not available; place the UCI abalone.data file at "
            f"{os.path.abspath(ABALONE_DEFAULT)} (or set ${ABALONE_ENV}). "
            "Source: https://archive.ics.uci.edu/ml/machine-learning-databases/abalone/abalone.data"
        )
    return path


def load_abalone():
    """Abalone features as used throughout: drop the categorical sex column,
    keep the 8 numeric columns (rings included), standardize."""
    X = bk.load_csv(require_abalone(), has_header=False, drop_columns=[0])
    assert X.n == 4177 and X.d == 8, f"unexpected abalone shape {X.n}x{X.d}"
    return bk.standardize(X)


@pytest.fixture(scope="session")
def abalone():
    return load_abalone()


def blob_truth(n, d, num_centers, spread, seed):
    """Re-derive the generator's centers/labels (documented draw order)."""
    rng = np.random.default_rng(seed)
    centers = rng.random((num_centers, d))
    labels = np.arange(n) % num_centers
    return centers, labels
