import numpy as np
import pytest

from turnpike_lab.model import SpatialGrid, build_laplacian_1d, heat_instance


def feasible_target(grid, level=1.0):
    """Steady state driven by the constant control ``level`` on the whole domain."""
    A = build_laplacian_1d(grid)
    return -np.linalg.solve(A, np.full(grid.n, level))


def reference_heat(n=15, horizon=1.0, dt=0.02, scale=1.0, **kw):
    grid = SpatialGrid(n)
    y0 = kw.pop("y0", np.sin(np.pi * grid.nodes))
    return heat_instance(grid, scale * feasible_target(grid), horizon=horizon, dt=dt, y0=y0, **kw)


@pytest.fixture
def heat15():
    return reference_heat()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
