import math

import numpy as np
import pytest

from pinn_gravity.analytic import (
    MasconModel,
    PointMassModel,
    PolyhedralModel,
    SphericalHarmonicModel,
    heterogeneous_truth,
    low_fidelity_sh,
    normalization,
    parse_sh_coefficients,
    pm_eval,
    read_sh_coefficients,
    sh_basis,
    sh_index,
    truth_from_anomalies,
    write_sh_coefficients,
)
from pinn_gravity.errors import OnSurfaceError, SingularityError
from pinn_gravity.geometry import sample_shell
from pinn_gravity.models import AnomalySpec, LowFidelityModel


def finite_difference_gradient(model, points, h=1e-5):
    """Central-difference gradient of a model's potential."""
    grad = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        plus = model.evaluate(points + step).potential
        minus = model.evaluate(points - step).potential
        grad[:, axis] = (plus - minus) / (2 * h)
    return grad


def random_sh_model(l_max, seed, scale=1e-2):
    rng = np.random.default_rng(seed)
    coefficients = scale * rng.standard_normal((l_max + 1) ** 2)
    coefficients[0] = 1.0
    return SphericalHarmonicModel.from_vector(mu=2.0, R=1.0, l_max=l_max, coefficients=coefficients)


def test_pm_eval_values():
    """Test the point-mass potential and acceleration at a single point."""
    result = pm_eval(4.0, [0.0, 2.0, 0.0])
    assert result.potential[0] == pytest.approx(2.0)
    np.testing.assert_allclose(result.acceleration[0], [0.0, -1.0, 0.0])


def test_pm_eval_offset_position():
    """Test a displaced point mass pulls toward its own position."""
    result = pm_eval(1.0, [[2.0, 0.0, 0.0]], position=[1.0, 0.0, 0.0])
    np.testing.assert_allclose(result.acceleration[0], [-1.0, 0.0, 0.0])


def test_pm_eval_singularity():
    """Test the point mass raises SingularityError at its own location."""
    with pytest.raises(SingularityError):
        pm_eval(1.0, [0.0, 0.0, 0.0])


def test_point_mass_model_param_count():
    """Test the point mass has a single parameter."""
    assert PointMassModel(mu=3.0).param_count == 1


def test_sh_index_ordering():
    """Test the coefficient ordering for degree two."""
    assert sh_index(2) == [
        ("C", 0, 0),
        ("C", 1, 0),
        ("C", 1, 1),
        ("S", 1, 1),
        ("C", 2, 0),
        ("C", 2, 1),
        ("S", 2, 1),
        ("C", 2, 2),
        ("S", 2, 2),
    ]
    assert len(sh_index(15)) == 256


def test_normalization_values():
    """Test the full normalization factors of the low degrees."""
    assert normalization(0, 0) == pytest.approx(1.0)
    assert normalization(1, 0) == pytest.approx(math.sqrt(3.0))
    assert normalization(1, 1) == pytest.approx(math.sqrt(3.0))
    assert normalization(2, 0) == pytest.approx(math.sqrt(5.0))
    assert normalization(2, 2) == pytest.approx(math.sqrt(5.0 / 12.0))


def test_sh_degree_zero_matches_point_mass(rng):
    """Test a model with only C00 = 1 reproduces the point mass."""
    points = rng.uniform(-5.0, 5.0, size=(200, 3))
    points = points[np.linalg.norm(points, axis=1) > 1.0]
    model = SphericalHarmonicModel.point_mass(mu=3.0, R=1.0, l_max=6)
    expected = pm_eval(3.0, points)
    result = model.evaluate(points)
    np.testing.assert_allclose(result.potential, expected.potential, rtol=1e-10)
    np.testing.assert_allclose(result.acceleration, expected.acceleration, rtol=1e-10, atol=1e-14)


def test_sh_acceleration_is_potential_gradient():
    """Test the analytic SH acceleration against finite differences of the potential."""
    model = random_sh_model(l_max=6, seed=11)
    points = sample_shell(1.0, 1.5, 3.0, 40, seed=5)
    expected = finite_difference_gradient(model, points)
    result = model.evaluate(points)
    scale = np.max(np.abs(expected))
    np.testing.assert_allclose(result.acceleration, expected, rtol=1e-6, atol=1e-8 * scale)


def test_sh_low_fidelity_matches_closed_form_j2():
    """Test the a-priori degree-two model against the closed-form J2 potential."""
    lf = LowFidelityModel(mu=2.0, radius=1.5, c20=-1e-2)
    model = low_fidelity_sh(lf)
    points = np.array([[2.0, 1.0, 0.5], [0.0, 0.0, 3.0], [-1.0, 2.5, -2.0]])
    r = np.linalg.norm(points, axis=1)
    u = points[:, 2] / r
    expected = lf.mu / r * (1.0 + lf.c20 * (lf.radius / r) ** 2 * 0.5 * (3.0 * u**2 - 1.0))
    np.testing.assert_allclose(model.evaluate(points).potential, expected, rtol=1e-12)


def test_sh_basis_shapes():
    """Test the basis has one column per coefficient."""
    potential, acceleration = sh_basis([[1.0, 2.0, 3.0], [0.0, 0.0, 2.0]], mu=1.0, R=1.0, l_max=4)
    assert potential.shape == (2, 25)
    assert acceleration.shape == (2, 3, 25)


def test_sh_basis_singular_at_origin():
    """Test the basis raises SingularityError at the origin."""
    with pytest.raises(SingularityError):
        sh_basis([0.0, 0.0, 0.0], mu=1.0, R=1.0, l_max=2)


def test_sh_rejects_nonzero_s_l0():
    """Test a non-zero S[l, 0] is rejected."""
    S = np.zeros((3, 3))
    S[2, 0] = 1.0
    with pytest.raises(ValueError):
        SphericalHarmonicModel(mu=1.0, R=1.0, l_max=2, C=np.eye(3), S=S)


def test_sh_vector_round_trip():
    """Test the flat coefficient vector rebuilds the same model."""
    model = random_sh_model(l_max=5, seed=2)
    rebuilt = SphericalHarmonicModel.from_vector(model.mu, model.R, model.l_max, model.vector)
    np.testing.assert_array_equal(rebuilt.C, model.C)
    np.testing.assert_array_equal(rebuilt.S, model.S)
    assert model.param_count == 36


def test_sh_inside_brillouin_sphere_warns(caplog):
    """Test evaluation inside the reference sphere logs a warning."""
    model = SphericalHarmonicModel.point_mass(mu=1.0, R=2.0, l_max=2)
    model.evaluate([[1.0, 0.0, 0.0]])
    assert "Brillouin" in caplog.text


@pytest.mark.parametrize("normalized", [False, True])
def test_sh_coefficient_file(tmp_path, normalized):
    """Test coefficient files written in either normalization read back the same model."""
    model = random_sh_model(l_max=8, seed=4)
    path = tmp_path / "coefficients.txt"
    write_sh_coefficients(model, path, normalized=normalized)
    restored = read_sh_coefficients(path)
    assert (restored.mu, restored.R, restored.l_max) == (model.mu, model.R, model.l_max)
    np.testing.assert_allclose(restored.C, model.C, rtol=1e-14, atol=1e-300)
    np.testing.assert_allclose(restored.S, model.S, rtol=1e-14, atol=1e-300)


def test_parse_sh_missing_records_are_zero():
    """Test coefficients absent from the file default to zero."""
    model = parse_sh_coefficients(["398600.4418 6378.137 3", "0 0 1.0 0.0", "2 0 -1.08e-3 0.0"])
    assert model.C[0, 0] == 1.0
    assert model.C[2, 0] == pytest.approx(-1.08e-3 / math.sqrt(5.0))
    assert model.C[3, 1] == 0.0


def test_parse_sh_invalid():
    """Test empty files and out-of-range records raise ValueError."""
    with pytest.raises(ValueError):
        parse_sh_coefficients([])
    with pytest.raises(ValueError):
        parse_sh_coefficients(["1.0 1.0 2", "3 0 1.0 0.0"])


def test_polyhedron_far_field_matches_point_mass(cube):
    """Test the cube looks like a point mass from far away."""
    model = PolyhedralModel(shape=cube, g_sigma=1.0)
    assert model.mu == pytest.approx(8.0)
    points = sample_shell(1.0, 60.0, 80.0, 20, seed=8)
    expected = pm_eval(8.0, points)
    result = model.evaluate(points)
    np.testing.assert_allclose(result.potential, expected.potential, rtol=1e-5)
    np.testing.assert_allclose(result.acceleration, expected.acceleration, rtol=1e-5, atol=1e-12)


def test_polyhedron_acceleration_is_potential_gradient(cube):
    """Test the polyhedron acceleration against finite differences outside and inside the body."""
    model = PolyhedralModel(shape=cube, g_sigma=1.0)
    points = np.array([[1.7, 0.4, -0.2], [0.3, -2.5, 1.1], [0.2, 0.1, -0.3]])
    expected = finite_difference_gradient(model, points)
    np.testing.assert_allclose(model.evaluate(points).acceleration, expected, rtol=1e-5, atol=1e-7)


def test_polyhedron_matches_voxel_sum(cube):
    """Test the polyhedron against a fine sum of point-mass voxels."""
    n = 20
    centres = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    grid = np.stack(np.meshgrid(centres, centres, centres, indexing="ij"), axis=-1).reshape(-1, 3)
    voxels = MasconModel(positions=grid, mus=np.full(len(grid), 8.0 / len(grid)))
    points = np.array([[3.0, 0.0, 0.0], [2.0, 2.0, 1.0], [0.0, -2.5, 2.5]])
    expected = voxels.evaluate(points)
    result = PolyhedralModel(shape=cube, g_sigma=1.0).evaluate(points)
    np.testing.assert_allclose(result.potential, expected.potential, rtol=1e-3)
    np.testing.assert_allclose(result.acceleration, expected.acceleration, rtol=1e-3, atol=1e-4)


def test_polyhedron_laplacian(cube):
    """Test the Laplacian is -4 pi G sigma inside and zero outside."""
    model = PolyhedralModel(shape=cube, g_sigma=0.5)
    values = model.laplacian([[0.2, 0.1, -0.3], [3.0, 0.0, 0.0]])
    np.testing.assert_allclose(values, [-2.0 * math.pi, 0.0], atol=1e-9)


def test_polyhedron_on_surface_raises(cube):
    """Test evaluating on a facet or an edge raises OnSurfaceError."""
    model = PolyhedralModel(shape=cube, g_sigma=1.0)
    with pytest.raises(OnSurfaceError):
        model.evaluate([1.0, 0.3, 0.2])
    with pytest.raises(OnSurfaceError):
        model.evaluate([1.0, 1.0, 0.0])


def test_polyhedron_from_mu(sphere):
    """Test the density is chosen to carry the requested mu."""
    model = PolyhedralModel.from_mu(sphere, mu=5.0)
    assert model.mu == pytest.approx(5.0)
    assert model.param_count == 3 * (len(sphere.vertices) + len(sphere.facets))


def test_polyhedron_rejects_non_positive_density(cube):
    """Test a non-positive G sigma is rejected."""
    with pytest.raises(ValueError):
        PolyhedralModel(shape=cube, g_sigma=0.0)


def test_mascon_single_element_is_point_mass():
    """Test a single mascon at the origin reproduces the point mass."""
    model = MasconModel(positions=np.zeros((1, 3)), mus=np.array([2.0]))
    points = np.array([[1.0, 2.0, 3.0], [-4.0, 0.0, 1.0]])
    expected = pm_eval(2.0, points)
    result = model.evaluate(points)
    np.testing.assert_allclose(result.potential, expected.potential)
    np.testing.assert_allclose(result.acceleration, expected.acceleration)
    assert model.param_count == 4
    assert model.total_mu == 2.0


def test_mascon_singularity():
    """Test evaluating at a mascon raises SingularityError."""
    model = MasconModel(positions=np.array([[0.5, 0.0, 0.0]]), mus=np.array([1.0]))
    with pytest.raises(SingularityError):
        model.evaluate([0.5, 0.0, 0.0])


def test_mascon_shape_mismatch():
    """Test mismatched positions and mus raise ValueError."""
    with pytest.raises(ValueError):
        MasconModel(positions=np.zeros((2, 3)), mus=np.ones(3))


def test_heterogeneous_truth_preserves_mu(cube):
    """Test the anomaly pair leaves the total mu unchanged."""
    truth = heterogeneous_truth(cube, mu=3.0)
    assert truth.mu == pytest.approx(3.0)
    assert truth.base.mu == pytest.approx(3.0)
    assert len(truth.anomalies) == 2
    np.testing.assert_allclose(truth.anomalies[0][0], [0.5 * cube.radius, 0.0, 0.0])


def test_heterogeneous_truth_is_sum_of_parts(cube):
    """Test the truth field equals the polyhedron plus its anomalies."""
    truth = heterogeneous_truth(cube, mu=3.0, fraction=0.2)
    points = np.array([[3.0, 1.0, 0.0], [0.0, 0.0, 4.0]])
    expected = truth.base.evaluate(points)
    for position, mu in truth.anomalies:
        expected = expected + pm_eval(mu, points, position=position)
    np.testing.assert_allclose(truth.evaluate(points).acceleration, expected.acceleration)


def test_truth_from_anomalies_non_positive_base(cube):
    """Test anomalies carrying the whole mu are rejected."""
    with pytest.raises(ValueError):
        truth_from_anomalies(cube, 1.0, [AnomalySpec(position=(0.1, 0.0, 0.0), mu_fraction=1.0)])


def test_truth_from_anomalies_scales_base(cube):
    """Test a positive anomaly is taken out of the base polyhedron."""
    truth = truth_from_anomalies(cube, 2.0, [AnomalySpec(position=(0.0, 0.2, 0.0), mu_fraction=0.25)])
    assert truth.base.mu == pytest.approx(1.5)
    assert truth.mu == pytest.approx(2.0)
