"""Training loops, datasets and noise injection."""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt
import torch
from pydantic import BaseModel, Field
from torch.optim.lr_scheduler import ReduceLROnPlateau

from pinn_gravity._types import DTYPE, Dataset, FloatArray, GravityEval, GravityModel, as_points
from pinn_gravity.errors import NonFiniteError, OnSurfaceError, TrainingDivergedError
from pinn_gravity.geometry import ShapeModel, interior_mask, sample_shell, sample_surface
from pinn_gravity.models import Architecture, DatasetMeta, DatasetSpec, Hyperparams, LossKind, TrainHistory
from pinn_gravity.network import Batch, LossSpec, MlpParams, apply, init_params, loss_param_grad
from pinn_gravity.pinn import PinnModel, batch_loss, nondim_batch

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# Surface samples sit this far (in body radii) above their facet.
SURFACE_OFFSET = 1e-6


@dataclass(eq=False)
class AdamState:
    """Adam moments held by a ``torch.optim.Adam`` over a single flat parameter."""

    parameter: torch.nn.Parameter
    optimizer: torch.optim.Adam

    @classmethod
    def create(cls, theta: torch.Tensor, lr: float) -> "AdamState":
        parameter = torch.nn.Parameter(theta.detach().clone())
        return cls(parameter=parameter, optimizer=torch.optim.Adam([parameter], lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS))

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])


@dataclass(eq=False)
class PlateauState:
    scheduler: ReduceLROnPlateau

    @classmethod
    def create(cls, adam: AdamState, hp: Hyperparams) -> "PlateauState":
        return cls(
            scheduler=ReduceLROnPlateau(
                adam.optimizer,
                mode="min",
                factor=hp.decay_rate,
                patience=hp.lr_patience,
                threshold=hp.min_delta,
                threshold_mode="rel",
                min_lr=hp.min_lr,
            )
        )


def adam_step(
    params: torch.Tensor,
    grad: torch.Tensor,
    state: AdamState,
    lr: float,
    epoch: Optional[int] = None,
    step: Optional[int] = None,
) -> tuple[torch.Tensor, AdamState]:
    """
    One Adam update of a flat parameter vector.

    Raises:
        NonFiniteError: If the gradient is not finite
    """
    if grad.shape != params.shape:
        raise ValueError(f"Gradient shape {tuple(grad.shape)} does not match parameters {tuple(params.shape)}")
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f"Non-finite gradient at epoch {epoch}, step {step}", epoch=epoch, step=step)
    with torch.no_grad():
        state.parameter.copy_(params)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.parameter.grad = grad.detach().clone()
    state.optimizer.step()
    return state.parameter.detach().clone(), state


def plateau_update(state: PlateauState, val_loss: float) -> float:
    """Feed one validation loss to the plateau scheduler and return the learning rate it leaves."""
    if not math.isfinite(val_loss):
        raise ValueError(f"Validation loss must be finite, got {val_loss}")
    state.scheduler.step(val_loss)
    return float(state.scheduler.optimizer.param_groups[0]["lr"])


EpochLoss = Callable[[torch.Tensor], float]


def _optimize(
    theta: torch.Tensor,
    loss_spec: LossSpec,
    architecture: Architecture,
    inputs: torch.Tensor,
    targets: torch.Tensor,
    val_loss_fn: EpochLoss,
    hp: Hyperparams,
    frozen: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, TrainHistory]:
    history = TrainHistory()
    adam = AdamState.create(theta, hp.learning_rate)
    plateau = PlateauState.create(adam, hp)
    generator = torch.Generator().manual_seed(hp.seed)
    n_train = len(inputs)

    best_theta = theta.detach().clone()
    best_val = math.inf
    patience_ref = math.inf
    waited = 0
    start_time = time.perf_counter()
    for epoch in range(hp.num_epochs):
        lr = adam.lr
        order = torch.randperm(n_train, generator=generator)
        total = 0.0
        for step, start in enumerate(range(0, n_train, hp.batch_size)):
            index = order[start : start + hp.batch_size]
            batch = Batch(inputs=inputs[index], targets=targets[index])
            try:
                loss, grad = loss_param_grad(MlpParams(architecture, theta), batch, loss_spec)
                if frozen is not None:
                    grad = grad.masked_fill(frozen, 0.0)
                theta, adam = adam_step(theta, grad, adam, lr, epoch=epoch, step=step)
            except NonFiniteError as e:
                raise TrainingDivergedError(f"Training diverged at epoch {epoch}, step {step}: {e.message}", history) from e
            total += float(loss) * len(index)
        train_loss = total / n_train
        val_loss = val_loss_fn(theta)
        if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
            raise TrainingDivergedError(f"Training diverged at epoch {epoch}: loss is NaN", history)

        plateau_update(plateau, val_loss)
        history.append(epoch, train_loss, val_loss, lr, time.perf_counter() - start_time)
        if val_loss < best_val:
            best_val = val_loss
            best_theta = theta.detach().clone()
            history.best_epoch = epoch
        if val_loss < patience_ref * (1.0 - hp.min_delta):
            patience_ref = val_loss
            waited = 0
        else:
            waited += 1
        if epoch % hp.log_every == 0 or epoch == hp.num_epochs - 1:
            logger.info(f"Epoch {epoch}: train={train_loss:.6g} val={val_loss:.6g} lr={lr:.3g}")
        if waited >= hp.early_stop_patience:
            logger.info(f"Early stopping at epoch {epoch}; best validation loss {best_val:.6g} at {history.best_epoch}")
            break
    return best_theta, history


def _check_dataset(data: Dataset) -> None:
    if len(data) < 2:
        raise ValueError("Training needs at least two samples to carve out a validation split")
    if not (np.all(np.isfinite(data.positions)) and np.all(np.isfinite(data.accelerations))):
        raise ValueError("Dataset contains non-finite values")


def train(model: PinnModel, data: Dataset, hp: Hyperparams) -> tuple[PinnModel, TrainHistory]:
    """
    Train a physics-informed model on acceleration labels.

    A seeded validation split is carved out first. The returned model carries the parameters of the epoch with the
    lowest validation loss.

    Raises:
        TrainingDivergedError: If the loss stops being finite; the error carries the history so far
    """
    _check_dataset(data)
    if hp.loss_kind is not LossKind.RMS and np.any(np.linalg.norm(data.accelerations, axis=1) == 0.0):
        raise ValueError("Percent losses need non-zero acceleration labels")
    if hp.num_epochs == 0:
        return model, TrainHistory()

    train_set, val_set = split_dataset(data, hp.validation_fraction, hp.seed)
    x_train, a_train = nondim_batch(model, train_set.positions, train_set.accelerations)
    x_val, a_val = nondim_batch(model, val_set.positions, val_set.accelerations)

    def loss_spec(theta: torch.Tensor, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        return batch_loss(theta, model, batch.inputs, batch.targets, hp.loss_kind)

    def val_loss_fn(theta: torch.Tensor) -> float:
        return float(batch_loss(theta, model, x_val, a_val, hp.loss_kind)[0])

    arch = model.params.architecture
    frozen = None
    if arch.transition and not hp.train_transition:
        frozen = torch.zeros(arch.param_count, dtype=torch.bool)
        frozen[-2:] = True

    logger.info(
        f"Training {arch.param_count}-parameter PINN on {len(train_set)} samples "
        f"({len(val_set)} validation), loss={hp.loss_kind.value}"
    )
    theta, history = _optimize(model.params.flat, loss_spec, arch, x_train, a_train, val_loss_fn, hp, frozen)
    return model.with_params(theta), history


# ---------------------------------------------------------------------------
# Traditional network baseline
# ---------------------------------------------------------------------------


def _minmax(values: FloatArray) -> tuple[FloatArray, FloatArray]:
    low, high = values.min(axis=0), values.max(axis=0)
    span = np.where(high > low, high - low, 1.0)
    return low, span


@dataclass(frozen=True, eq=False)
class TnnModel:
    """
    Plain network regressing acceleration from position on ``[-1, 1]`` min-max scaled inputs and outputs.

    Predicts accelerations only.
    """

    params: MlpParams
    x_low: FloatArray
    x_span: FloatArray
    a_low: FloatArray
    a_span: FloatArray

    @property
    def param_count(self) -> int:
        return self.params.architecture.param_count

    def scale_inputs(self, points: FloatArray) -> torch.Tensor:
        return torch.from_numpy(2.0 * (points - self.x_low) / self.x_span - 1.0).to(DTYPE)

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        pts = as_points(points)
        out = apply(self.params.architecture, self.params.flat, self.scale_inputs(pts)).detach().numpy()
        return GravityEval(potential=None, acceleration=(out + 1.0) / 2.0 * self.a_span + self.a_low)


def train_tnn(data: Dataset, hp: Hyperparams, architecture: Architecture) -> tuple[TnnModel, TrainHistory]:
    """Fit a plain tanh MLP from position to acceleration with a mean squared error on the scaled outputs."""
    _check_dataset(data)
    params = init_params(
        depth=architecture.depth,
        width=architecture.width,
        feature_dim=3,
        seed=architecture.seed,
        output_dim=3,
        transition=False,
        gated=False,
    )
    x_low, x_span = _minmax(data.positions)
    a_low, a_span = _minmax(data.accelerations)
    model = TnnModel(params=params, x_low=x_low, x_span=x_span, a_low=a_low, a_span=a_span)
    if hp.num_epochs == 0:
        return model, TrainHistory()

    def scale_targets(acc: FloatArray) -> torch.Tensor:
        return torch.from_numpy(2.0 * (acc - a_low) / a_span - 1.0).to(DTYPE)

    train_set, val_set = split_dataset(data, hp.validation_fraction, hp.seed)
    x_train, y_train = model.scale_inputs(train_set.positions), scale_targets(train_set.accelerations)
    x_val, y_val = model.scale_inputs(val_set.positions), scale_targets(val_set.accelerations)
    arch = params.architecture

    def squared_error(theta: torch.Tensor, inputs: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        return ((apply(arch, theta, inputs) - targets) ** 2).sum(dim=-1)

    def loss_spec(theta: torch.Tensor, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
        per_sample = squared_error(theta, batch.inputs, batch.targets)
        return per_sample.mean(), per_sample

    def val_loss_fn(theta: torch.Tensor) -> float:
        return float(squared_error(theta, x_val, y_val).mean())

    logger.info(f"Training {arch.param_count}-parameter TNN on {len(train_set)} samples")
    theta, history = _optimize(params.flat, loss_spec, arch, x_train, y_train, val_loss_fn, hp)
    trained = TnnModel(params=params.replace(theta), x_low=x_low, x_span=x_span, a_low=a_low, a_span=a_span)
    return trained, history


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def add_noise(data: Dataset, fraction: float, seed: int) -> Dataset:
    """Perturb every acceleration by ``fraction * |a|`` along a uniformly random direction."""
    if fraction < 0:
        raise ValueError(f"Noise fraction must be non-negative, got {fraction}")
    if fraction == 0:
        return data
    rng = np.random.default_rng(seed)
    directions = rng.normal(size=data.accelerations.shape)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    magnitude = np.linalg.norm(data.accelerations, axis=1, keepdims=True)
    return Dataset(
        positions=data.positions,
        accelerations=data.accelerations + fraction * magnitude * directions,
        potentials=data.potentials,
        interior=data.interior,
        meta=data.meta.model_copy(update={"noise": fraction}),
    )


def split_dataset(data: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded ``(train, validation)`` split with at least one sample on each side."""
    n = len(data)
    n_val = min(n - 1, max(1, round(n * fraction)))
    order = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


def generate_dataset(truth: GravityModel, shape: ShapeModel, spec: DatasetSpec, truth_id: str = "unknown") -> Dataset:
    """
    Sample a shell band plus optional surface points and label them with the truth field.

    Shell radii are in body radii. Surface samples are lifted just above their facets. Points inside the body are
    kept and flagged.
    """
    R = shape.radius
    blocks = []
    interior = []
    if spec.n > 0:
        shell = sample_shell(R, spec.r_min * R, spec.r_max * R, spec.n, spec.seed)
        try:
            inside = interior_mask(shape, shell)
        except OnSurfaceError:
            logger.warning("A shell sample fell on the surface; resampling with the next seed")
            return generate_dataset(truth, shape, spec.model_copy(update={"seed": spec.seed + 1}), truth_id)
        blocks.append(shell)
        interior.append(inside)
        if inside.any():
            logger.warning(f"{int(inside.sum())} of {spec.n} training samples lie inside the body; kept and flagged")
    if spec.surface_n > 0:
        points, facets = sample_surface(shape, spec.surface_n, spec.seed + 1, return_facets=True)
        blocks.append(points + SURFACE_OFFSET * R * shape.facet_normals[facets])
        interior.append(np.zeros(spec.surface_n, dtype=bool))
    positions = np.concatenate(blocks)
    labels = truth.evaluate(positions)
    data = Dataset(
        positions=positions,
        accelerations=labels.acceleration,
        potentials=labels.potential,
        interior=np.concatenate(interior),
        meta=DatasetMeta(
            seed=spec.seed,
            r_min=spec.r_min * R,
            r_max=spec.r_max * R,
            surface_n=spec.surface_n,
            truth_id=truth_id,
        ),
    )
    logger.info(f"Generated {len(data)} samples between {spec.r_min}R and {spec.r_max}R from {truth_id}")
    return add_noise(data, spec.noise, spec.seed + 2)


class DatasetSidecar(BaseModel):
    """Metadata written next to a dataset CSV."""

    meta: DatasetMeta
    interior: Optional[list[int]] = Field(None, description="Indices of samples inside the body")


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def write_dataset(data: Dataset, path: Union[str, Path]) -> None:
    """Write ``x,y,z,ax,ay,az[,U]`` rows and a ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [data.positions, data.accelerations]
    header = "x,y,z,ax,ay,az"
    if data.potentials is not None:
        columns.append(data.potentials[:, None])
        header += ",U"
    np.savetxt(path, np.hstack(columns), delimiter=",", header=header, comments="", fmt="%.17g")
    interior = None if data.interior is None else np.flatnonzero(data.interior).tolist()
    _sidecar_path(path).write_text(DatasetSidecar(meta=data.meta, interior=interior).model_dump_json(indent=2))
    logger.info(f"Wrote {len(data)} samples to {path}")


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    with path.open() as f:
        header = f.readline().strip().split(",")
    if header[:6] != ["x", "y", "z", "ax", "ay", "az"]:
        raise ValueError(f"{path} does not start with an x,y,z,ax,ay,az header")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    potentials = table[:, 6].copy() if len(header) > 6 and header[6] == "U" else None
    sidecar_path = _sidecar_path(path)
    meta, interior = DatasetMeta(), None
    if sidecar_path.exists():
        sidecar = DatasetSidecar.model_validate_json(sidecar_path.read_text())
        meta = sidecar.meta
        if sidecar.interior is not None:
            interior = np.zeros(len(table), dtype=bool)
            interior[sidecar.interior] = True
    return Dataset(
        positions=table[:, :3].copy(),
        accelerations=table[:, 3:6].copy(),
        potentials=potentials,
        interior=interior,
        meta=meta,
    )


def write_history(history: TrainHistory, path: Union[str, Path]) -> None:
    """Write ``epoch,train_loss,val_loss,lr`` rows."""
    table = np.column_stack([history.epoch, history.train_loss, history.val_loss, history.lr]).reshape(-1, 4)
    np.savetxt(
        path,
        table,
        delimiter=",",
        header="epoch,train_loss,val_loss,lr",
        comments="",
        fmt=["%d", "%.17g", "%.17g", "%.17g"],
    )
