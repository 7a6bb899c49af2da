"""
On-disk model bundles.

A bundle is a directory holding ``manifest.json`` plus kind-specific payloads. ``load_bundle`` returns a model
satisfying ``GravityModel`` whatever its kind.
"""

import logging
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from pinn_gravity._types import GravityModel
from pinn_gravity.analytic import (
    MasconModel,
    PointMassModel,
    PolyhedralModel,
    SphericalHarmonicModel,
    read_sh_coefficients,
    write_sh_coefficients,
)
from pinn_gravity.errors import ConfigError
from pinn_gravity.geometry import load_shape, to_obj_text
from pinn_gravity.models import BoundaryConfig, FeatureKind, FusionConfig, ModelKind, NonDimConstants
from pinn_gravity.network import load_params, save_params
from pinn_gravity.pinn import PinnModel
from pinn_gravity.regress import ElmModel
from pinn_gravity.training import TnnModel

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
PINN_KINDS = ("pinn3", "pinn2", "pinn1")


class BundleManifest(BaseModel):
    """Header of a model bundle."""

    kind: ModelKind
    param_count: int = Field(..., ge=0)
    regression_time_s: Optional[float] = Field(None, description="Wall time of the fit; excluded from reproducibility")
    header: dict[str, Any] = Field(default_factory=dict, description="Kind-specific fields")


class PinnHeader(BaseModel):
    constants: NonDimConstants
    boundary: BoundaryConfig
    fusion: FusionConfig
    feature_kind: FeatureKind
    proxy: bool


class ScalingHeader(BaseModel):
    """Min-max ranges of an acceleration-only regressor."""

    x_low: list[float]
    x_span: list[float]
    a_low: list[float]
    a_span: list[float]


def _kind_of(model: GravityModel) -> ModelKind:
    kinds: list[tuple[type, ModelKind]] = [
        (PinnModel, "pinn3"),
        (TnnModel, "tnn"),
        (SphericalHarmonicModel, "sh"),
        (MasconModel, "mascon"),
        (ElmModel, "elm"),
        (PointMassModel, "pm"),
        (PolyhedralModel, "poly"),
    ]
    for cls, kind in kinds:
        if isinstance(model, cls):
            return kind
    raise TypeError(f"No bundle format for {type(model).__name__}")


def save_bundle(
    model: GravityModel,
    directory: Union[str, Path],
    kind: Optional[ModelKind] = None,
    regression_time_s: Optional[float] = None,
) -> BundleManifest:
    """
    Write ``model`` and its manifest into ``directory``.

    Args:
        model: Any supported model
        directory: Bundle directory, created if missing
        kind: Kind recorded in the manifest; inferred from the model type by default
        regression_time_s: Fit wall time to record

    Returns:
        The manifest written
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    kind = kind or _kind_of(model)
    header: dict[str, Any] = {}

    if isinstance(model, PinnModel):
        save_params(model.params, directory)
        header = PinnHeader(
            constants=model.constants,
            boundary=model.boundary,
            fusion=model.fusion,
            feature_kind=model.feature_kind,
            proxy=model.proxy,
        ).model_dump()
    elif isinstance(model, TnnModel):
        save_params(model.params, directory)
        header = ScalingHeader(
            x_low=model.x_low.tolist(),
            x_span=model.x_span.tolist(),
            a_low=model.a_low.tolist(),
            a_span=model.a_span.tolist(),
        ).model_dump()
    elif isinstance(model, SphericalHarmonicModel):
        write_sh_coefficients(model, directory / "coefficients.txt", normalized=True)
    elif isinstance(model, MasconModel):
        table = np.column_stack([model.positions, model.mus])
        np.savetxt(directory / "mascons.csv", table, delimiter=",", header="x,y,z,mu", comments="", fmt="%.17g")
        header = {"seed": model.seed}
    elif isinstance(model, ElmModel):
        np.savez(
            directory / "elm.npz",
            input_weights=model.input_weights,
            hidden_bias=model.hidden_bias,
            output_weights=model.output_weights,
            x_low=model.x_low,
            x_span=model.x_span,
            a_low=model.a_low,
            a_span=model.a_span,
        )
        header = {"seed": model.seed, "n_hidden": model.n_hidden}
    elif isinstance(model, PointMassModel):
        header = {"mu": model.mu}
    elif isinstance(model, PolyhedralModel):
        (directory / "shape.obj").write_text(to_obj_text(model.shape))
        header = {"g_sigma": model.g_sigma}

    manifest = BundleManifest(
        kind=kind,
        param_count=model.param_count,
        regression_time_s=regression_time_s,
        header=header,
    )
    (directory / MANIFEST).write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Wrote {kind} bundle with {model.param_count} parameters to {directory}")
    return manifest


def read_manifest(directory: Union[str, Path]) -> BundleManifest:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"No bundle manifest at {path}")
    try:
        return BundleManifest.model_validate_json(path.read_text())
    except ValidationError as e:
        raise ConfigError(f"Invalid bundle manifest {path}: {e}") from e


def load_bundle(directory: Union[str, Path]) -> GravityModel:
    """
    Load the model stored in a bundle directory.

    Raises:
        FileNotFoundError: If the manifest or a payload is missing
        ConfigError: If the manifest is invalid
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    kind = manifest.kind

    if kind in PINN_KINDS:
        header = PinnHeader.model_validate(manifest.header)
        return PinnModel(
            params=load_params(directory),
            constants=header.constants,
            boundary=header.boundary,
            fusion=header.fusion,
            feature_kind=header.feature_kind,
            proxy=header.proxy,
        )
    if kind == "tnn":
        scaling = ScalingHeader.model_validate(manifest.header)
        return TnnModel(
            params=load_params(directory),
            x_low=np.array(scaling.x_low),
            x_span=np.array(scaling.x_span),
            a_low=np.array(scaling.a_low),
            a_span=np.array(scaling.a_span),
        )
    if kind == "sh":
        return read_sh_coefficients(directory / "coefficients.txt")
    if kind == "mascon":
        table = np.loadtxt(directory / "mascons.csv", delimiter=",", skiprows=1, ndmin=2)
        return MasconModel(positions=table[:, :3].copy(), mus=table[:, 3].copy(), seed=manifest.header.get("seed"))
    if kind == "elm":
        with np.load(directory / "elm.npz") as arrays:
            return ElmModel(**{name: arrays[name] for name in arrays.files}, seed=manifest.header.get("seed", 0))
    if kind == "pm":
        return PointMassModel(mu=float(manifest.header["mu"]))
    shape = load_shape((directory / "shape.obj").read_text(), recenter=False)
    return PolyhedralModel(shape=shape, g_sigma=float(manifest.header["g_sigma"]))


def count_parameters(directory: Union[str, Path]) -> int:
    """Recount the parameters of a bundle from its payload files alone."""
    directory = Path(directory)
    kind = read_manifest(directory).kind
    if kind in PINN_KINDS or kind == "tnn":
        return int(np.load(directory / "params.npy").size)
    if kind == "sh":
        model = read_sh_coefficients(directory / "coefficients.txt")
        return (model.l_max + 1) ** 2
    if kind == "mascon":
        return int(np.loadtxt(directory / "mascons.csv", delimiter=",", skiprows=1, ndmin=2).size)
    if kind == "elm":
        with np.load(directory / "elm.npz") as arrays:
            return sum(arrays[name].size for name in ("input_weights", "hidden_bias", "output_weights"))
    if kind == "pm":
        return 1
    shape = load_shape((directory / "shape.obj").read_text(), recenter=False)
    return 3 * (len(shape.vertices) + len(shape.facets))
