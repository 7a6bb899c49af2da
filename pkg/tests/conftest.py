import numpy as np
import pytest

from pinn_gravity._types import Dataset
from pinn_gravity.analytic import pm_eval
from pinn_gravity.geometry import cube_mesh, ellipsoid_mesh, icosphere_mesh, sample_shell


@pytest.fixture
def cube():
    """Unit-half-edge cube centred on the origin."""
    return cube_mesh(1.0)


@pytest.fixture
def sphere():
    """Level-2 icosphere of unit radius."""
    return icosphere_mesh(2)


@pytest.fixture
def ellipsoid():
    """Coarse 2:1:1 ellipsoid."""
    return ellipsoid_mesh(2.0, 1.0, 1.0, level=2)


@pytest.fixture
def point_mass_data():
    """Point-mass samples between 1 and 3 body radii with potential labels (mu = 1, R = 1)."""
    positions = sample_shell(1.0, 1.0, 3.0, 600, seed=3)
    truth = pm_eval(1.0, positions)
    return Dataset(positions=positions, accelerations=truth.acceleration, potentials=truth.potential)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
