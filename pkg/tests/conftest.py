"""
Shared fixtures for the FracSmith test suite.
"""
import os
import sys

import numpy as np
import pytest

# Add repository root to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    """Seeded generator so every run sees the same random functions."""
    return np.random.default_rng(20240601)


@pytest.fixture
def unit_grid():
    from frac1d import IntervalGrid
    return IntervalGrid.uniform(0.0, 1.0, 256)


def relative_l2(approx, exact, weights):
    """Relative discrete L2 distance over finite entries."""
    mask = np.isfinite(approx) & np.isfinite(exact)
    diff = np.sum(weights[mask] * np.abs(approx[mask] - exact[mask]) ** 2)
    return float(np.sqrt(diff / np.sum(weights[mask] * np.abs(exact[mask]) ** 2)))
