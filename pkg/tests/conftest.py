"""Shared fixtures: coarse grids and small deterministic point sets.

The coarse grid (18 m cells over the default range) keeps every scene at a
handful of pillars, so full-pipeline tests stay in the millisecond range
while exercising exactly the production code paths.
"""

from __future__ import annotations

import numpy as np
import pytest

from fgpfe.gridding import GridSpec, VirtualGridSpec


@pytest.fixture
def coarse_grid() -> GridSpec:
    """6 x 6 pillars over the default detection range."""
    return GridSpec(cell=(18.0, 18.0))


@pytest.fixture
def small_virtual() -> VirtualGridSpec:
    return VirtualGridSpec(vertical_bins=4, temporal_bins=4)


def random_points(
    rng: np.random.Generator,
    n: int,
    grid: GridSpec,
    out_fraction: float = 0.0,
) -> np.ndarray:
    """[n, 5] points uniform over the grid's ranges, a fraction pushed outside."""
    pts = np.column_stack(
        [
            rng.uniform(grid.x_range[0], grid.x_range[1], size=n),
            rng.uniform(grid.y_range[0], grid.y_range[1], size=n),
            rng.uniform(grid.z_range[0], grid.z_range[1], size=n),
            rng.uniform(0.0, 255.0, size=n),
            rng.uniform(0.0, 0.5, size=n),
        ]
    )
    n_out = int(out_fraction * n)
    if n_out:
        which = rng.choice(n, size=n_out, replace=False)
        col = rng.integers(0, 3, size=n_out)
        span = {
            0: grid.x_range,
            1: grid.y_range,
            2: grid.z_range,
        }
        for i, c in zip(which, col):
            lo, hi = span[int(c)]
            pts[i, c] = hi + rng.uniform(0.5, 5.0) if rng.random() < 0.5 else lo - rng.uniform(0.5, 5.0)
    return pts
