import numpy as np
import pytest
import torch

from pinn_gravity._types import DTYPE, Dataset
from pinn_gravity.analytic import PointMassModel
from pinn_gravity.errors import NonFiniteError
from pinn_gravity.geometry import interior_mask
from pinn_gravity.models import Architecture, BodyProperties, DatasetSpec, FusionConfig, Hyperparams, LossKind
from pinn_gravity.pinn import build_model
from pinn_gravity.training import (
    AdamState,
    PlateauState,
    adam_step,
    add_noise,
    generate_dataset,
    plateau_update,
    read_dataset,
    split_dataset,
    train,
    train_tnn,
    write_dataset,
    write_history,
)

UNIT_BODY = BodyProperties(mu=1.0, R=1.0, semi_axes=(1.0, 1.0, 1.0), eccentricity=0.0)
QUICK = Hyperparams(num_epochs=3, batch_size=128, learning_rate=1e-3, log_every=1)


def small_model(data):
    return build_model(
        data,
        UNIT_BODY,
        Architecture(depth=2, width=8, seed=1),
        fusion=FusionConfig.from_body(UNIT_BODY, enabled=False),
    )


def test_adam_first_step():
    """Test the first Adam step moves each parameter by about lr against its gradient sign."""
    theta = torch.zeros(3, dtype=DTYPE)
    grad = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    state = AdamState.create(theta, lr=0.1)
    updated, state = adam_step(theta, grad, state, lr=0.1)
    expected = -0.1 * grad / (grad.abs() + 1e-8)
    torch.testing.assert_close(updated, expected, rtol=1e-7, atol=0.0)
    assert state.lr == 0.1


def test_adam_step_rejects_non_finite_gradient():
    """Test a NaN gradient raises NonFiniteError with its position."""
    theta = torch.zeros(2, dtype=DTYPE)
    state = AdamState.create(theta, lr=0.1)
    with pytest.raises(NonFiniteError) as excinfo:
        adam_step(theta, torch.tensor([float("nan"), 0.0], dtype=DTYPE), state, lr=0.1, epoch=4, step=2)
    assert excinfo.value.epoch == 4
    assert excinfo.value.step == 2


def test_adam_step_shape_mismatch():
    """Test a gradient of the wrong shape raises ValueError."""
    theta = torch.zeros(2, dtype=DTYPE)
    with pytest.raises(ValueError):
        adam_step(theta, torch.zeros(3, dtype=DTYPE), AdamState.create(theta, lr=0.1), lr=0.1)


def test_plateau_halves_after_patience():
    """Test a flat validation loss halves the learning rate on the 1502nd report."""
    adam = AdamState.create(torch.zeros(1, dtype=DTYPE), lr=2.0**-8)
    plateau = PlateauState.create(adam, Hyperparams())
    for _ in range(1501):
        lr = plateau_update(plateau, 1.0)
    assert lr == 2.0**-8
    assert plateau_update(plateau, 1.0) == 2.0**-9


def test_plateau_respects_min_lr():
    """Test the learning rate never drops below the floor."""
    adam = AdamState.create(torch.zeros(1, dtype=DTYPE), lr=1e-3)
    plateau = PlateauState.create(adam, Hyperparams(lr_patience=1, min_lr=4e-4))
    for _ in range(20):
        lr = plateau_update(plateau, 1.0)
    assert lr == pytest.approx(4e-4)


def test_plateau_rejects_nan():
    """Test a NaN validation loss raises ValueError."""
    adam = AdamState.create(torch.zeros(1, dtype=DTYPE), lr=1e-3)
    with pytest.raises(ValueError):
        plateau_update(PlateauState.create(adam, Hyperparams()), float("nan"))


def test_split_dataset(point_mass_data):
    """Test the split is ninety-ten, disjoint and reproducible."""
    train_set, val_set = split_dataset(point_mass_data, 0.1, seed=2)
    assert (len(train_set), len(val_set)) == (540, 60)
    together = np.vstack([train_set.positions, val_set.positions])
    assert len(np.unique(together, axis=0)) == 600
    again, _ = split_dataset(point_mass_data, 0.1, seed=2)
    np.testing.assert_array_equal(again.positions, train_set.positions)


def test_split_dataset_keeps_one_each_side(point_mass_data):
    """Test a tiny dataset still yields a validation sample."""
    train_set, val_set = split_dataset(point_mass_data.subset(np.arange(2)), 0.1)
    assert (len(train_set), len(val_set)) == (1, 1)


def test_add_noise_magnitude(point_mass_data):
    """Test every perturbation has magnitude exactly fraction times the label magnitude."""
    noisy = add_noise(point_mass_data, 0.1, seed=5)
    delta = np.linalg.norm(noisy.accelerations - point_mass_data.accelerations, axis=1)
    np.testing.assert_allclose(delta, 0.1 * np.linalg.norm(point_mass_data.accelerations, axis=1), rtol=1e-10)
    assert noisy.meta.noise == 0.1
    np.testing.assert_array_equal(noisy.positions, point_mass_data.positions)


def test_add_noise_zero_and_negative(point_mass_data):
    """Test zero noise is the identity and negative noise is rejected."""
    assert add_noise(point_mass_data, 0.0, seed=1) is point_mass_data
    with pytest.raises(ValueError):
        add_noise(point_mass_data, -0.1, seed=1)


def test_generate_dataset_flags_interior(sphere):
    """Test shell samples inside the body are kept and flagged, surface samples are not."""
    spec = DatasetSpec(n=200, r_min=0.0, r_max=3.0, surface_n=20, seed=4)
    data = generate_dataset(PointMassModel(mu=1.0), sphere, spec, truth_id="pm")
    assert len(data) == 220
    np.testing.assert_array_equal(data.interior[:200], interior_mask(sphere, data.positions[:200]))
    assert not data.interior[200:].any()
    assert data.interior.any()
    assert data.meta.truth_id == "pm"
    assert data.meta.r_max == pytest.approx(3.0)


def test_generate_dataset_is_reproducible(sphere):
    """Test the same dataset settings give the same samples."""
    spec = DatasetSpec(n=50, r_min=1.0, r_max=2.0, seed=9)
    a = generate_dataset(PointMassModel(mu=1.0), sphere, spec)
    b = generate_dataset(PointMassModel(mu=1.0), sphere, spec)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.accelerations, b.accelerations)


def test_generate_dataset_surface_points_outside(sphere):
    """Test surface samples are lifted just outside the mesh."""
    spec = DatasetSpec(n=0, r_min=0.0, r_max=1.0, surface_n=30, seed=2)
    data = generate_dataset(PointMassModel(mu=1.0), sphere, spec)
    assert not interior_mask(sphere, data.positions).any()


def test_dataset_file_round_trip(tmp_path, point_mass_data):
    """Test a dataset with interior flags survives writing and reading."""
    interior = np.zeros(len(point_mass_data), dtype=bool)
    interior[[3, 10]] = True
    data = Dataset(
        positions=point_mass_data.positions,
        accelerations=point_mass_data.accelerations,
        potentials=point_mass_data.potentials,
        interior=interior,
    )
    path = tmp_path / "dataset.csv"
    write_dataset(data, path)
    restored = read_dataset(path)
    np.testing.assert_array_equal(restored.positions, data.positions)
    np.testing.assert_array_equal(restored.accelerations, data.accelerations)
    np.testing.assert_array_equal(restored.potentials, data.potentials)
    np.testing.assert_array_equal(restored.interior, interior)


def test_read_dataset_rejects_bad_header(tmp_path):
    """Test a file without the expected columns raises ValueError."""
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_dataset(path)


def test_train_short_run(point_mass_data):
    """Test a few epochs record history and return the best parameters."""
    model = small_model(point_mass_data)
    trained, history = train(model, point_mass_data, QUICK)
    assert len(history) == 3
    assert history.best_epoch in (0, 1, 2)
    assert all(np.isfinite(history.train_loss)) and all(np.isfinite(history.val_loss))
    assert not torch.equal(trained.params.flat, model.params.flat)
    assert trained.param_count == model.param_count


def test_train_is_deterministic(point_mass_data):
    """Test two runs from the same seed end with identical parameters and loss history."""
    first, first_history = train(small_model(point_mass_data), point_mass_data, QUICK)
    second, second_history = train(small_model(point_mass_data), point_mass_data, QUICK)
    assert torch.equal(first.params.flat, second.params.flat)
    assert first_history.train_loss == second_history.train_loss
    assert first_history.val_loss == second_history.val_loss
    assert first_history.best_epoch == second_history.best_epoch


def test_train_frozen_transition(point_mass_data):
    """Test the transition scalars stay put when they are not trained."""
    model = small_model(point_mass_data)
    hp = QUICK.model_copy(update={"train_transition": False, "num_epochs": 1})
    trained, _ = train(model, point_mass_data, hp)
    torch.testing.assert_close(trained.params.flat[-2:], model.params.flat[-2:])


def test_train_zero_epochs(point_mass_data):
    """Test zero epochs returns the untouched model."""
    model = small_model(point_mass_data)
    trained, history = train(model, point_mass_data, QUICK.model_copy(update={"num_epochs": 0}))
    assert trained is model
    assert len(history) == 0


def test_train_rejects_zero_labels_for_percent_loss(point_mass_data):
    """Test a zero acceleration label is rejected by the percent losses."""
    accelerations = point_mass_data.accelerations.copy()
    accelerations[0] = 0.0
    data = Dataset(positions=point_mass_data.positions, accelerations=accelerations)
    model = small_model(point_mass_data)
    with pytest.raises(ValueError):
        train(model, data, QUICK.model_copy(update={"loss_kind": LossKind.RMS_PCT}))


def test_train_tnn(point_mass_data):
    """Test the traditional network trains and predicts accelerations only."""
    model, history = train_tnn(point_mass_data, QUICK, Architecture(depth=2, width=8, seed=0))
    assert len(history) == 3
    result = model.evaluate(point_mass_data.positions[:5])
    assert result.potential is None
    assert result.acceleration.shape == (5, 3)
    assert model.param_count == model.params.flat.numel()
    assert not model.params.architecture.gated
    # (3 + 1) * 8 inputs, 8 * 8 + 8 hidden, (8 + 1) * 3 outputs
    assert model.param_count == 32 + 72 + 27


def test_write_history(tmp_path, point_mass_data):
    """Test the history file has a header and one row per epoch."""
    _, history = train(small_model(point_mass_data), point_mass_data, QUICK)
    path = tmp_path / "history.csv"
    write_history(history, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr"
    assert len(lines) == 4
