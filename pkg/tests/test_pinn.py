import numpy as np
import pytest
import torch

from pinn_gravity._types import DTYPE, Dataset
from pinn_gravity.errors import ScalingError, SingularityError
from pinn_gravity.models import (
    Architecture,
    BodyProperties,
    BoundaryConfig,
    FusionConfig,
    LossKind,
    LowFidelityModel,
)
from pinn_gravity.network import transition_raw
from pinn_gravity.pinn import (
    batch_loss,
    build_model,
    compute_constants,
    default_boundary,
    feature_map,
    features,
    loss_rms,
    loss_rms_pct,
    nondim_batch,
    percent_terms,
    pinn_acceleration,
    pinn_potential,
    transition,
    unscale_proxy,
)

UNIT_BODY = BodyProperties(mu=1.0, R=1.0, semi_axes=(1.0, 1.0, 1.0), eccentricity=0.0)


def residual_model(data, **kwargs):
    """Small model without fusion, so U* comes from the truth potential alone."""
    return build_model(
        data,
        UNIT_BODY,
        Architecture(depth=2, width=8, seed=3),
        fusion=FusionConfig.from_body(UNIT_BODY, enabled=False),
        **kwargs,
    )


@pytest.mark.parametrize("point", [[0.2, -0.3, 0.4], [1.5, 2.0, -0.5]])
def test_features_jacobian_matches_autograd(point):
    """Test the analytic feature Jacobian on both sides of the unit sphere."""
    x = torch.tensor(point, dtype=DTYPE)
    feat, jacobian = features(x.numpy())
    expected = torch.autograd.functional.jacobian(lambda y: feature_map(y, "pines"), x)
    torch.testing.assert_close(feat, feature_map(x, "pines"))
    torch.testing.assert_close(jacobian, expected)


def test_features_are_bounded():
    """Test the Pines features stay in [-1, 1] from the interior out to 100 radii."""
    rng = np.random.default_rng(0)
    directions = rng.standard_normal((50, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions * rng.uniform(0.01, 100.0, size=(50, 1))
    feat, _ = features(points)
    assert feat.shape == (50, 5)
    assert torch.all(feat.abs() <= 1.0)


def test_features_singular_at_origin():
    """Test features raise SingularityError at the origin."""
    with pytest.raises(SingularityError):
        features([0.0, 0.0, 0.0])


def test_feature_map_kinds():
    """Test the radial and cartesian feature widths."""
    x = torch.tensor([[3.0, 0.0, 4.0]], dtype=DTYPE)
    assert feature_map(x, "radial").tolist() == [[5.0, 0.6, 0.0, 0.8]]
    assert torch.equal(feature_map(x, "cartesian"), x)


def test_unscale_proxy():
    """Test the proxy is divided by r only outside the unit sphere."""
    U = torch.tensor([2.0, 2.0], dtype=DTYPE)
    r = torch.tensor([0.5, 4.0], dtype=DTYPE)
    assert unscale_proxy(U, r).tolist() == [2.0, 0.5]


def test_transition_values():
    """Test the smooth step is one half at the reference radius and saturates beyond it."""
    assert transition(torch.tensor(3.0, dtype=DTYPE), 2.0, 3.0).item() == pytest.approx(0.5)
    assert transition(torch.tensor(50.0, dtype=DTYPE), 2.0, 3.0).item() == pytest.approx(1.0)
    assert transition(torch.tensor(0.5, dtype=DTYPE), 2.0, 3.0).item() == pytest.approx(0.0, abs=1e-4)


def test_compute_constants_from_potentials(point_mass_data):
    """Test U* is the largest potential label when no low-fidelity model is removed."""
    constants = compute_constants(point_mass_data, UNIT_BODY)
    assert constants.x_star == 1.0
    assert constants.U_star == pytest.approx(float(np.max(point_mass_data.potentials)))
    assert constants.a_star == pytest.approx(constants.U_star)


def test_compute_constants_without_potentials(point_mass_data):
    """Test U* falls back to mu / R for acceleration-only data."""
    data = Dataset(positions=point_mass_data.positions, accelerations=point_mass_data.accelerations)
    body = BodyProperties(mu=8.0, R=2.0, semi_axes=(2.0, 2.0, 2.0), eccentricity=0.0)
    assert compute_constants(data, body).U_star == pytest.approx(4.0)


def test_compute_constants_low_fidelity_exceeds_truth(point_mass_data):
    """Test a low-fidelity model that explains the whole truth raises ScalingError."""
    with pytest.raises(ScalingError):
        compute_constants(point_mass_data, UNIT_BODY, LowFidelityModel(mu=1.0, radius=1.0))


def test_default_boundary(point_mass_data):
    """Test the reference radius sits at the highest training radius."""
    boundary = default_boundary(point_mass_data, UNIT_BODY)
    r_max = np.max(np.linalg.norm(point_mass_data.positions, axis=1))
    assert boundary.r_ref == pytest.approx(r_max)
    assert boundary.k == 2.0


def test_build_model_sizes(point_mass_data):
    """Test the network input width follows the feature kind."""
    pines = residual_model(point_mass_data)
    radial = residual_model(point_mass_data, feature_kind="radial")
    assert pines.param_count == 227
    assert radial.params.architecture.feature_dim == 4
    assert radial.param_count == 227 - 3 * 8


def test_acceleration_is_potential_gradient(point_mass_data):
    """Test the pipeline acceleration against finite differences of the pipeline potential."""
    model = residual_model(point_mass_data)
    points = np.array([[1.3, 0.2, -0.4], [0.0, -2.1, 0.9], [0.5, 0.3, 0.2]])
    h = 1e-6
    expected = np.empty_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        expected[:, axis] = (pinn_potential(model, points + step) - pinn_potential(model, points - step)) / (2 * h)
    np.testing.assert_allclose(pinn_acceleration(model, points), expected, rtol=1e-5, atol=1e-8)


def test_boundary_limit_recovers_point_mass(point_mass_data):
    """Test the blended potential tends to mu / r far outside the training data."""
    model = residual_model(point_mass_data)
    points = np.array([[100.0, 0.0, 0.0], [0.0, -80.0, 60.0]])
    r = np.linalg.norm(points, axis=1)
    np.testing.assert_allclose(pinn_potential(model, points) * r, 1.0, rtol=1e-6)


def test_boundary_disabled_uses_network_only(point_mass_data):
    """Test disabling the boundary leaves a network-only potential that does not match the point mass."""
    model = residual_model(point_mass_data, boundary=BoundaryConfig(enabled=False))
    value = pinn_potential(model, [[100.0, 0.0, 0.0]])[0]
    assert abs(value * 100.0 - 1.0) > 1e-6


def test_with_params_updates_boundary(point_mass_data):
    """Test new parameters carry their decoded transition scalars into the boundary config."""
    model = residual_model(point_mass_data)
    flat = model.params.flat.clone()
    flat[-2:] = transition_raw(3.0, 7.0)
    updated = model.with_params(flat)
    assert (updated.boundary.k, updated.boundary.r_ref) == (pytest.approx(3.0), pytest.approx(7.0))
    assert model.boundary.k == pytest.approx(2.0)


def test_negative_raw_sharpness_keeps_blend_monotone(point_mass_data):
    """Test a negative stored sharpness still blends towards mu / r with increasing radius."""
    model = residual_model(point_mass_data)
    flat = model.params.flat.clone()
    flat[-2] = -5.0
    updated = model.with_params(flat)
    assert updated.boundary.k > 0.0
    assert updated.boundary.r_ref >= 1.0
    radii = torch.linspace(0.5, updated.boundary.r_ref + 50.0, 200, dtype=DTYPE)
    weights = transition(radii, updated.boundary.k, updated.boundary.r_ref)
    assert torch.all(weights[1:] >= weights[:-1])
    r = updated.boundary.r_ref + 20.0 / updated.boundary.k
    np.testing.assert_allclose(pinn_potential(updated, [[r, 0.0, 0.0]]) * r, 1.0, rtol=1e-6)


def test_pinn_potential_training_mode_tracks_parameters(point_mass_data):
    """Test training mode returns a tensor differentiable in the parameters."""
    model = residual_model(point_mass_data)
    out = pinn_potential(model, [[1.5, 0.0, 0.0]], mode="training")
    assert isinstance(out, torch.Tensor)
    np.testing.assert_allclose(out.detach().numpy(), pinn_potential(model, [[1.5, 0.0, 0.0]]))


def test_pinn_singular_at_origin(point_mass_data):
    """Test evaluation at the origin raises SingularityError."""
    model = residual_model(point_mass_data)
    with pytest.raises(SingularityError):
        model.evaluate([0.0, 0.0, 0.0])


def test_loss_values():
    """Test the RMS and RMS-plus-percent losses on a hand-made batch."""
    target = torch.tensor([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]], dtype=DTYPE)
    predicted = torch.tensor([[1.0, 0.5, 0.0], [0.0, 2.0, 1.0]], dtype=DTYPE)
    assert loss_rms(predicted, target).item() == pytest.approx(0.75)
    assert loss_rms_pct(predicted, target).item() == pytest.approx(0.75 + 0.5)


def test_percent_loss_rejects_zero_labels():
    """Test the percent term raises ValueError on a zero-magnitude label."""
    with pytest.raises(ValueError):
        percent_terms(torch.ones((2, 3), dtype=DTYPE), torch.zeros((2, 3), dtype=DTYPE))


def test_batch_loss_kinds(point_mass_data):
    """Test the percent and Laplacian terms only ever add to the RMS loss."""
    model = residual_model(point_mass_data)
    x_nd, a_nd = nondim_batch(model, point_mass_data.positions[:32], point_mass_data.accelerations[:32])
    theta = model.params.flat
    rms, per_sample = batch_loss(theta, model, x_nd, a_nd, LossKind.RMS)
    pct, _ = batch_loss(theta, model, x_nd, a_nd, LossKind.RMS_PCT)
    al, _ = batch_loss(theta, model, x_nd, a_nd, LossKind.AL)
    assert per_sample.shape == (32,)
    assert rms.item() <= pct.item() <= al.item()
