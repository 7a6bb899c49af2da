"""Acceptance-scale experiments. Deselected by default; run with ``pytest -m slow``."""

import csv

import numpy as np
import pytest

from pinn_gravity._types import Dataset
from pinn_gravity.analytic import PointMassModel, PolyhedralModel, SphericalHarmonicModel, low_fidelity_sh, pm_eval
from pinn_gravity.cli import cmd_mods_study, fit_network, resolve_truth
from pinn_gravity.evalsuite import (
    TruthTrajectoryCache,
    accumulated_error,
    generalization_metric,
    orbital_period,
    percent_error,
    propagate,
)
from pinn_gravity.geometry import cube_mesh, sample_shell
from pinn_gravity.models import (
    Architecture,
    BodyProperties,
    BoundaryConfig,
    ExperimentConfig,
    FusionConfig,
    Hyperparams,
    LossKind,
    LowFidelityModel,
    TrajectoryConfig,
)
from pinn_gravity.pinn import build_model, pinn_acceleration, pinn_potential
from pinn_gravity.regress import regress_elm, regress_sh
from pinn_gravity.training import generate_dataset, train, train_tnn

pytestmark = pytest.mark.slow

UNIT_BODY = BodyProperties(mu=1.0, R=1.0, semi_axes=(1.0, 1.0, 1.0), eccentricity=0.0)


def point_mass_dataset(n, r_min, r_max, seed):
    positions = sample_shell(1.0, r_min, r_max, n, seed=seed)
    truth = pm_eval(1.0, positions)
    return Dataset(positions=positions, accelerations=truth.acceleration, potentials=truth.potential)


@pytest.fixture(scope="module")
def trained_point_mass_pinn():
    """Small PINN trained for 2^13 epochs on 512 point-mass samples between 1 and 3 radii."""
    data = point_mass_dataset(512, 1.0, 3.0, seed=0)
    model = build_model(
        data,
        UNIT_BODY,
        Architecture(depth=2, width=8, seed=0),
        fusion=FusionConfig.from_body(UNIT_BODY, enabled=False),
    )
    trained, _ = train(model, data, Hyperparams())
    return trained


def test_pinn_learns_point_mass(trained_point_mass_pinn):
    """Test the trained small network is within one percent on held-out points of its band."""
    points = sample_shell(1.0, 1.0, 3.0, 1000, seed=99)
    assert percent_error(PointMassModel(1.0), trained_point_mass_pinn, points) < 1.0


def test_trained_pinn_boundary_limit(trained_point_mass_pinn):
    """Test the blended potential recovers mu / r past the transition and the far field stays bounded."""
    boundary = trained_point_mass_pinn.boundary
    r = boundary.r_ref + 10.0 / boundary.k
    directions = np.array([[1.0, 0.0, 0.0], [0.0, -0.6, 0.8], [0.48, 0.6, -0.64]])
    U = pinn_potential(trained_point_mass_pinn, r * directions)
    np.testing.assert_allclose(U * r, 1.0, rtol=1e-3)
    _, exterior, extrapolation = generalization_metric(
        PointMassModel(1.0), trained_point_mass_pinn, 1.0, samples_per_radius=20
    )
    assert extrapolation < 10.0 * max(exterior, 1e-3)


def test_only_the_pinn_extrapolates(trained_point_mass_pinn):
    """Test the traditional network and ELM diverge beyond their training band while the PINN does not."""
    data = point_mass_dataset(512, 1.0, 3.0, seed=0)
    truth = PointMassModel(1.0)
    tnn, _ = train_tnn(data, Hyperparams(num_epochs=2**11), Architecture(depth=4, width=32, seed=0))
    elm = regress_elm(data, n_hidden=280, seed=0)
    for baseline in (tnn, elm):
        assert generalization_metric(truth, baseline, 1.0, samples_per_radius=20)[2] > 100.0
    assert generalization_metric(truth, trained_point_mass_pinn, 1.0, samples_per_radius=20)[2] < 100.0


def test_pipeline_gradient_at_many_points():
    """Test pipeline accelerations against central differences of the potential at 100 points."""
    data = point_mass_dataset(300, 1.0, 3.0, seed=1)
    model = build_model(
        data,
        UNIT_BODY,
        Architecture(depth=4, width=16, seed=2),
        fusion=FusionConfig.from_body(UNIT_BODY, enabled=False),
    )
    rng = np.random.default_rng(5)
    directions = rng.standard_normal((400, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = rng.uniform(0.2, 5.0, size=400)
    radii = radii[np.abs(radii - 1.0) > 1e-3][:100]
    points = directions[: len(radii)] * radii[:, None]
    h = 1e-6
    expected = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        expected[:, axis] = (pinn_potential(model, points + step) - pinn_potential(model, points - step)) / (2 * h)
    actual = pinn_acceleration(model, points)
    error = np.linalg.norm(actual - expected, axis=1) / np.linalg.norm(expected, axis=1)
    assert error.max() < 1e-6


def test_polyhedron_matches_voxel_quadrature():
    """Test the cube field against a million-cell midpoint quadrature of Newton's integral."""
    cube = cube_mesh(1.0)
    model = PolyhedralModel.from_mu(cube, 1.0)
    cells = 100
    centres = (np.arange(cells) + 0.5) * (2.0 / cells) - 1.0
    grid = np.stack(np.meshgrid(centres, centres, centres, indexing="ij"), axis=-1).reshape(-1, 3)
    cell_mu = 1.0 / len(grid)
    points = np.array([[2.0, 0.0, 0.0], [0.0, 1.8, 1.2], [1.5, -1.5, 1.5], [-3.0, 0.5, 0.0]])
    for point in points:
        offsets = grid - point
        distances = np.linalg.norm(offsets, axis=1)
        expected = cell_mu * np.sum(offsets / distances[:, None] ** 3, axis=0)
        actual = model.evaluate(point).acceleration[0]
        assert np.linalg.norm(actual - expected) / np.linalg.norm(expected) < 1e-3


def test_regress_sh_recovers_degree_four_field():
    """Test every coefficient of a synthetic degree-four field is recovered to one part in a million."""
    rng = np.random.default_rng(8)
    size = 25
    magnitudes = rng.uniform(1e-3, 1e-2, size=size) * rng.choice([-1.0, 1.0], size=size)
    magnitudes[0] = 1.0
    truth = SphericalHarmonicModel.from_vector(mu=1.0, R=1.0, l_max=4, coefficients=magnitudes)
    positions = sample_shell(1.0, 1.0, 3.0, 2000, seed=8)
    data = Dataset(positions=positions, accelerations=truth.evaluate(positions).acceleration)
    model = regress_sh(data, l_max=4, alpha=1e-12, mu=1.0, R=1.0)
    np.testing.assert_allclose(model.vector, truth.vector, rtol=1e-6)


def test_two_body_energy_is_conserved():
    """Test the specific orbital energy drifts less than a part in a billion over ten periods."""
    mu = 1.0
    config = TrajectoryConfig(
        a_sma=3.0,
        ecc=0.2,
        inc=45.0,
        omega0=0.0,
        duration=10 * orbital_period(3.0, mu),
        sample_count=200,
        rtol=1e-12,
        atol=1e-14,
    )
    states = propagate(PointMassModel(mu), config, mu).states
    energy = 0.5 * np.sum(states[:, 3:] ** 2, axis=1) - mu / np.linalg.norm(states[:, :3], axis=1)
    assert np.max(np.abs(energy / energy[0] - 1.0)) < 1e-9
    assert energy[0] == pytest.approx(-mu / (2 * 3.0), rel=1e-12)


def test_percent_loss_removes_low_altitude_bias():
    """Test the RMS-trained network is at least twice as wrong above 5R as the RMS+% network on the same data."""
    truth = low_fidelity_sh(LowFidelityModel(mu=1.0, radius=1.0, c20=-0.05))
    positions = sample_shell(1.0, 1.0, 50.0, 1000, seed=4)
    labels = truth.evaluate(positions)
    data = Dataset(positions=positions, accelerations=labels.acceleration, potentials=labels.potential)
    far = sample_shell(1.0, 5.0, 50.0, 1000, seed=40)
    errors = {}
    for loss in (LossKind.RMS, LossKind.RMS_PCT):
        model = build_model(
            data,
            UNIT_BODY,
            Architecture(depth=4, width=16, seed=0),
            boundary=BoundaryConfig(enabled=False),
            fusion=FusionConfig.from_body(UNIT_BODY, enabled=False),
            proxy=False,
        )
        trained, _ = train(model, data, Hyperparams(num_epochs=2**11, loss_kind=loss))
        errors[loss] = percent_error(truth, trained, far)
    assert errors[LossKind.RMS] > 2.0 * errors[LossKind.RMS_PCT]


def asteroid_config(tmp_path, **updates):
    config = ExperimentConfig.model_validate(
        {
            "dataset": {"n": 5000, "r_min": 0.0, "r_max": 15.0, "seed": 0},
            "hyperparams": {"num_epochs": 2**10},
            "metrics": {"samples_per_radius": 20},
            "out_dir": str(tmp_path),
        }
    )
    return config.model_copy(update=updates)


def test_modification_ladder_extrapolates_best_with_the_boundary(tmp_path):
    """Test the blended stage extrapolates better than every earlier stage and stays near its exterior error."""
    path = cmd_mods_study(asteroid_config(tmp_path, mods_stages=["I", "II", "III", "IV"]))
    with path.open() as f:
        rows = {row["stage"]: row for row in csv.DictReader(f)}
    extrapolation = {stage: float(row["extrapolation"]) for stage, row in rows.items()}
    assert extrapolation["IV"] < min(extrapolation["I"], extrapolation["II"], extrapolation["III"])
    assert extrapolation["IV"] < 10.0 * max(float(rows["IV"]["exterior"]), 1e-3)


def cube_truth_config(tmp_path, **dataset):
    return ExperimentConfig.model_validate(
        {
            "truth": {"shape": "builtin:cube", "mu": 1.0},
            "dataset": {"n": 4096, "r_min": 0.0, "r_max": 5.0, "seed": 0, **dataset},
            "model": {"kind": "pinn3", "depth": 4, "width": 16},
            "hyperparams": {"num_epochs": 2**11},
            "out_dir": str(tmp_path),
        }
    )


def test_noisy_labels_train_below_the_noise_floor(tmp_path):
    """Test ten percent label noise leaves the validation error under ten percent."""
    config = cube_truth_config(tmp_path, n=2**13, r_max=10.0, noise=0.1)
    config = config.model_copy(update={"truth": config.truth.model_copy(update={"anomalies": []})})
    truth = resolve_truth(config.truth)
    data = generate_dataset(truth.model, truth.shape, config.dataset, config.truth.truth_id)
    assert data.meta.noise == 0.1
    model = fit_network(config, data, truth).model
    R = truth.shape.radius
    assert percent_error(truth.model, model, sample_shell(R, R, 10.0 * R, 1000, seed=77)) < 10.0


def test_trained_pinn_orbit_beats_constant_density(tmp_path):
    """Test the accumulated orbit error of the constant-density polyhedron exceeds the trained PINN's and grows with time."""
    config = cube_truth_config(tmp_path)
    truth = resolve_truth(config.truth)
    data = generate_dataset(truth.model, truth.shape, config.dataset, config.truth.truth_id)
    pinn = fit_network(config, data, truth).model
    poly = PolyhedralModel.from_mu(truth.shape, 1.0)
    a_sma = 3.0 * truth.shape.radius
    full = TrajectoryConfig(a_sma=a_sma, inc=90.0, duration=orbital_period(a_sma, 1.0), sample_count=101)
    half = full.model_copy(update={"duration": full.duration / 2, "sample_count": 51})
    cache = TruthTrajectoryCache()
    reference = cache.get(truth.model, full, 1.0)
    poly_error, _ = accumulated_error(propagate(poly, full, 1.0), reference)
    pinn_error, _ = accumulated_error(propagate(pinn, full, 1.0), reference)
    assert poly_error > pinn_error
    poly_half, _ = accumulated_error(propagate(poly, half, 1.0), cache.get(truth.model, half, 1.0))
    assert poly_half <= poly_error
