"""Shared fixtures and small numeric helpers for the test suite."""

import math

import numpy as np
import pytest

from pics.data import PhantomConfig, write_phantom_dataset


def pearson(a, b) -> float:
    """Reference correlation, independent of the package's own helper."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.corrcoef(a, b)[0, 1])


def nan_eq(x, y) -> bool:
    """Equality where NaN == NaN (for normalized-mass round-trips)."""
    if isinstance(x, float) and isinstance(y, float):
        return (math.isnan(x) and math.isnan(y)) or x == y
    return x == y


def rows_equal(rows_a, rows_b) -> bool:
    if len(rows_a) != len(rows_b):
        return False
    return all(len(ra) == len(rb) and all(nan_eq(a, b) for a, b in zip(ra, rb))
               for ra, rb in zip(rows_a, rows_b))


@pytest.fixture(scope="session")
def tiny_ds(tmp_path_factory):
    """Small phantom dataset: 4 fields at 32x32, split 2 train/1 val/1 test."""
    out = tmp_path_factory.mktemp("tiny_ds")
    cfg = PhantomConfig(size=32, n_cells=1, soma_radius_px=6, seed=5,
                        noise_sigma=0.1)
    manifest = write_phantom_dataset(str(out), cfg, n_fields=4, n_test=1,
                                     val_fraction=0.34)
    return out, manifest
