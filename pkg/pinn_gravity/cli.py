"""
Command-line front end.

Every command reads an ``ExperimentConfig`` JSON file (``--config``), applies the ``--seed`` and ``--out`` overrides
and writes its results under the output directory. Exit codes: 0 success, 2 configuration, 3 I/O, 4 numerical or
model failure, 1 anything else.
"""

import argparse
import asyncio
import csv
import itertools
import logging
import math
import sys
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from pinn_gravity._types import Dataset, GravityModel
from pinn_gravity.analytic import HeterogeneousTruthModel, PointMassModel, PolyhedralModel, truth_from_anomalies
from pinn_gravity.bundles import load_bundle, read_manifest, save_bundle
from pinn_gravity.errors import ConfigError, GravityModelError
from pinn_gravity.evalsuite import (
    TruthTrajectoryCache,
    accumulated_error,
    comparison_table,
    evaluate_all,
    propagate,
    write_report,
)
from pinn_gravity.geometry import ShapeModel, body_properties, builtin_shape, load_shape
from pinn_gravity.models import (
    Architecture,
    BodyProperties,
    BoundaryConfig,
    ExperimentConfig,
    FusionConfig,
    LossKind,
    MetricSelection,
    MetricsReport,
    ModelKind,
    ModelSpec,
    TrainHistory,
    TruthConfig,
)
from pinn_gravity.pinn import build_model, default_boundary
from pinn_gravity.regress import cross_validate_alpha, regress_elm, regress_mascons, regress_sh
from pinn_gravity.training import generate_dataset, read_dataset, train, train_tnn, write_dataset, write_history

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

SIZE_BUDGETS = {"small": 250, "large": 30_000}
NETWORK_PRESETS = {"small": (2, 8), "large": (8, 64)}
PINN_DEPTHS = (2, 4, 6, 8)
NETWORK_KINDS: tuple[ModelKind, ...] = ("pinn3", "pinn2", "pinn1", "tnn")
REGRESSION_KINDS: tuple[ModelKind, ...] = ("sh", "mascon", "elm", "pm", "poly")
DEFAULT_ELM_ALPHA = 1e-8

# Model switches and loss of every rung of the modification ladder.
LADDER: dict[str, dict[str, Any]] = {
    "baseline": {"feature_kind": "radial", "proxy": False, "boundary": False, "fusion": False, "loss": LossKind.RMS},
    "I": {"feature_kind": "pines", "proxy": False, "boundary": False, "fusion": False, "loss": LossKind.RMS},
    "II": {"feature_kind": "pines", "proxy": False, "boundary": False, "fusion": False, "loss": LossKind.RMS_PCT},
    "III": {"feature_kind": "pines", "proxy": True, "boundary": False, "fusion": False, "loss": LossKind.RMS_PCT},
    "IV": {"feature_kind": "pines", "proxy": True, "boundary": True, "fusion": False, "loss": LossKind.RMS_PCT},
    "V": {"feature_kind": "pines", "proxy": True, "boundary": True, "fusion": True, "loss": LossKind.RMS_PCT},
}


class CommandOptions(BaseModel):
    """Per-invocation inputs that are not part of the experiment config."""

    data: Optional[str] = Field(None, description="Existing dataset CSV; generated from the config when absent")
    bundles: list[str] = Field(default_factory=list, description="Bundle directories; the config list when empty")
    workers: int = Field(1, ge=1, description="Concurrent ablation cells")


@dataclass(frozen=True)
class Command:
    func: Callable[[ExperimentConfig, CommandOptions], Any]
    help: str


COMMANDS: dict[str, Command] = {}


def command(name: str, help: str) -> Callable[[Callable[..., Any]], Callable[..., Any]]:
    """Register a ``cmd_*`` function under a subcommand name."""

    def decorator(func: Callable[..., Any]) -> Callable[..., Any]:
        COMMANDS[name] = Command(func, help)
        return func

    return decorator


@dataclass(frozen=True, eq=False)
class Truth:
    """Resolved truth field with its shape and body properties."""

    model: HeterogeneousTruthModel
    shape: ShapeModel
    config: TruthConfig

    @property
    def body(self) -> BodyProperties:
        return body_properties(self.shape, self.config.mu)


@dataclass(frozen=True, eq=False)
class FitResult:
    model: GravityModel
    kind: ModelKind
    elapsed: float
    history: Optional[TrainHistory] = None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path: Optional[str]) -> ExperimentConfig:
    """
    Read an experiment config, or the defaults when no path is given.

    Raises:
        ConfigError: If the file is missing or invalid
    """
    if path is None:
        return ExperimentConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file {config_path} does not exist")
    try:
        return ExperimentConfig.model_validate_json(config_path.read_text())
    except ValidationError as e:
        raise ConfigError(f"Invalid config {config_path}: {e}") from e


def with_overrides(config: ExperimentConfig, seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Apply ``--seed`` to every seed in the config and ``--out`` to the output directory."""
    data = config.model_dump()
    if seed is not None:
        data["dataset"]["seed"] = seed
        data["hyperparams"]["seed"] = seed
        data["metrics"]["seed"] = seed
    if out is not None:
        data["out_dir"] = out
    return ExperimentConfig.model_validate(data)


def set_field(config: ExperimentConfig, dotted: str, value: Any) -> ExperimentConfig:
    """
    Copy of ``config`` with one dotted field replaced, validated.

    Raises:
        ConfigError: If the field does not exist or the value is invalid
    """
    data = config.model_dump()
    *parents, leaf = dotted.split(".")
    node = data
    for key in parents:
        if not isinstance(node.get(key), dict):
            raise ConfigError(f"Unknown config section {key!r} in {dotted!r}")
        node = node[key]
    if leaf not in node:
        raise ConfigError(f"Unknown config field {dotted!r}")
    node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid value {value!r} for {dotted}: {e}") from e


def resolve_shape(truth: TruthConfig) -> ShapeModel:
    """Generate a builtin shape or read an ``.obj`` file."""
    if truth.shape.startswith("builtin:"):
        try:
            return builtin_shape(truth.shape.removeprefix("builtin:"))
        except ValueError as e:
            raise ConfigError(str(e)) from e
    path = Path(truth.shape)
    if not path.exists():
        raise ConfigError(f"Shape file {path} does not exist")
    return load_shape(path.read_text())


def resolve_truth(truth: TruthConfig) -> Truth:
    shape = resolve_shape(truth)
    return Truth(model=truth_from_anomalies(shape, truth.mu, truth.anomalies), shape=shape, config=truth)


def output_dir(config: ExperimentConfig) -> Path:
    path = Path(config.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Sizes
# ---------------------------------------------------------------------------


def pinn_param_count(depth: int, width: int, feature_dim: int = 5) -> int:
    return Architecture(depth=depth, width=width, feature_dim=feature_dim).param_count


def network_dims(budget: int, feature_dim: int = 5) -> tuple[int, int]:
    """``(depth, width)`` whose parameter count is closest to ``budget``; shallower wins ties."""
    best: Optional[tuple[int, int, int]] = None
    for depth in PINN_DEPTHS:
        for width in range(1, 257):
            gap = abs(pinn_param_count(depth, width, feature_dim) - budget)
            if best is None or gap < best[0]:
                best = (gap, depth, width)
    assert best is not None
    return best[1], best[2]


def sh_degree(budget: int) -> int:
    """Degree whose ``(l_max + 1)**2`` coefficient count is closest to ``budget``."""
    root = math.isqrt(budget)
    candidates = [max(root - 1, 0), root]
    return min(candidates, key=lambda n: (abs((n + 1) ** 2 - budget), n))


def param_budget(spec: ModelSpec) -> int:
    if spec.param_budget is not None:
        return spec.param_budget
    if spec.size == "custom":
        raise ConfigError(f"Model kind {spec.kind} with size 'custom' needs explicit dimensions or a param_budget")
    return SIZE_BUDGETS[spec.size]


def resolve_architecture(spec: ModelSpec, seed: int) -> Architecture:
    """Explicit dimensions first, then an explicit budget, then the size preset."""
    if spec.depth is not None and spec.width is not None:
        depth, width = spec.depth, spec.width
    elif spec.param_budget is None and spec.size in NETWORK_PRESETS:
        depth, width = NETWORK_PRESETS[spec.size]
    else:
        depth, width = network_dims(param_budget(spec))
    return Architecture(depth=depth, width=width, seed=seed)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def pinn_switches(spec: ModelSpec) -> dict[str, Any]:
    """Feature kind, proxy, boundary, fusion and loss for a PINN generation."""
    if spec.kind == "pinn2":
        return {"feature_kind": "radial", "proxy": False, "boundary": False, "fusion": False, "loss": LossKind.RMS}
    if spec.kind == "pinn1":
        return {"feature_kind": "cartesian", "proxy": False, "boundary": False, "fusion": False, "loss": LossKind.RMS}
    return {
        "feature_kind": spec.feature_kind,
        "proxy": spec.proxy,
        "boundary": spec.boundary,
        "fusion": spec.fusion,
        "loss": None,
    }


def fit_network(config: ExperimentConfig, data: Dataset, truth: Truth) -> FitResult:
    spec, hp = config.model, config.hyperparams
    architecture = resolve_architecture(spec, hp.seed)
    start = time.perf_counter()
    if spec.kind == "tnn":
        model, history = train_tnn(data, hp, architecture)
        return FitResult(model=model, kind="tnn", elapsed=time.perf_counter() - start, history=history)

    switches = pinn_switches(spec)
    if switches["loss"] is not None:
        hp = hp.model_copy(update={"loss_kind": switches["loss"]})
    body = truth.body
    boundary = default_boundary(data, body, k=spec.k)
    if spec.r_ref is not None:
        boundary = BoundaryConfig(enabled=True, r_ref=spec.r_ref, k=spec.k)
    boundary = boundary.model_copy(update={"enabled": switches["boundary"]})
    fusion = FusionConfig.from_body(body, enabled=switches["fusion"], c20=spec.c20)
    model = build_model(
        data,
        body,
        architecture,
        boundary=boundary,
        fusion=fusion,
        feature_kind=switches["feature_kind"],
        proxy=switches["proxy"],
    )
    trained, history = train(model, data, hp)
    return FitResult(model=trained, kind=spec.kind, elapsed=time.perf_counter() - start, history=history)


def fit_regression(config: ExperimentConfig, data: Dataset, truth: Truth) -> FitResult:
    spec = config.model
    mu, R, shape = truth.config.mu, truth.shape.radius, truth.shape
    start = time.perf_counter()
    model: GravityModel
    if spec.kind == "sh":
        l_max = spec.l_max if spec.l_max is not None else sh_degree(param_budget(spec))
        alpha = spec.alpha if spec.alpha is not None else cross_validate_alpha(data, l_max, mu, R, seed=config.dataset.seed)
        model = regress_sh(data, l_max, alpha, mu, R)
    elif spec.kind == "mascon":
        n_total = spec.n_mascons if spec.n_mascons is not None else max(1, param_budget(spec) // 4)
        model = regress_mascons(data, shape, n_total, mu, seed=config.hyperparams.seed)
    elif spec.kind == "elm":
        n_hidden = spec.n_hidden if spec.n_hidden is not None else max(1, (param_budget(spec) - 3) // 7)
        alpha = spec.alpha if spec.alpha is not None else DEFAULT_ELM_ALPHA
        model = regress_elm(data, n_hidden, alpha, seed=config.hyperparams.seed)
    elif spec.kind == "pm":
        model = PointMassModel(mu=mu)
    else:
        model = PolyhedralModel.from_mu(shape, mu)
    return FitResult(model=model, kind=spec.kind, elapsed=time.perf_counter() - start)


def fit(config: ExperimentConfig, data: Dataset, truth: Truth) -> FitResult:
    if config.model.kind in NETWORK_KINDS:
        return fit_network(config, data, truth)
    return fit_regression(config, data, truth)


def dataset_for(config: ExperimentConfig, truth: Truth, options: CommandOptions) -> Dataset:
    if options.data is not None:
        return read_dataset(options.data)
    return generate_dataset(truth.model, truth.shape, config.dataset, truth.config.truth_id)


def _write_rows(path: Path, rows: Sequence[dict[str, Any]]) -> None:
    columns: list[str] = []
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="NA", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@command("gen-data", "Sample and label a training dataset")
def cmd_gen_data(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    truth = resolve_truth(config.truth)
    data = generate_dataset(truth.model, truth.shape, config.dataset, config.truth.truth_id)
    path = output_dir(config) / "dataset.csv"
    write_dataset(data, path)
    return path


def _fit_and_save(config: ExperimentConfig, options: CommandOptions, allowed: tuple[ModelKind, ...]) -> Path:
    if config.model.kind not in allowed:
        raise ConfigError(f"Model kind {config.model.kind!r} is not handled here; expected one of {', '.join(allowed)}")
    truth = resolve_truth(config.truth)
    data = dataset_for(config, truth, options)
    result = fit(config, data, truth)
    out = output_dir(config)
    bundle = out / "bundle"
    save_bundle(result.model, bundle, kind=result.kind, regression_time_s=result.elapsed)
    if result.history is not None:
        write_history(result.history, out / "history.csv")
    logger.info(f"Fit {result.kind} with {result.model.param_count} parameters in {result.elapsed:.3f} s")
    return bundle


@command("train", "Train a PINN or traditional network and write a bundle")
def cmd_train(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    return _fit_and_save(config, options or CommandOptions(), NETWORK_KINDS)


@command("regress", "Regress a classical model and write a bundle")
def cmd_regress(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    return _fit_and_save(config, options or CommandOptions(), REGRESSION_KINDS)


def _bundles(config: ExperimentConfig, options: CommandOptions) -> list[str]:
    bundles = options.bundles or config.bundles
    if not bundles:
        raise ConfigError("No bundles given; pass --bundle or list them in the config")
    return bundles


def _evaluate_bundle(
    bundle: str,
    truth: Truth,
    metrics: MetricSelection,
    cache: TruthTrajectoryCache,
    name: Optional[str] = None,
) -> MetricsReport:
    manifest = read_manifest(bundle)
    return evaluate_all(
        truth.model,
        load_bundle(bundle),
        truth.shape,
        metrics,
        truth.config.mu,
        name=name or Path(bundle).name,
        cache=cache,
        regression_time_s=manifest.regression_time_s,
    )


@command("evaluate", "Run the metric suite on each bundle")
def cmd_evaluate(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> list[MetricsReport]:
    options = options or CommandOptions()
    truth = resolve_truth(config.truth)
    cache = TruthTrajectoryCache()
    out = output_dir(config)
    reports = []
    for bundle in _bundles(config, options):
        report = _evaluate_bundle(bundle, truth, config.metrics, cache)
        write_report(report, out / f"report_{report.model}.json")
        reports.append(report)
    return reports


@command("compare", "Evaluate bundles and write the comparison table")
def cmd_compare(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    reports = cmd_evaluate(config, options)
    path = output_dir(config) / "comparison.csv"
    path.write_text(comparison_table(reports))
    logger.info(f"Wrote comparison of {len(reports)} models to {path}")
    return path


@command("trajectory", "Propagate the evaluation orbit with each bundle")
def cmd_trajectory(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> list[Path]:
    options = options or CommandOptions()
    truth = resolve_truth(config.truth)
    orbit, mu = config.metrics.orbit, truth.config.mu
    cache = TruthTrajectoryCache()
    reference = cache.get(truth.model, orbit, mu)
    out = output_dir(config)
    paths, rows = [], []
    for bundle in _bundles(config, options):
        name = Path(bundle).name
        trajectory = propagate(load_bundle(bundle), orbit, mu)
        total, final = accumulated_error(trajectory, reference)
        path = out / f"trajectory_{name}.csv"
        np.savetxt(
            path,
            np.column_stack([trajectory.times, trajectory.states]),
            delimiter=",",
            header="t,x,y,z,vx,vy,vz",
            comments="",
            fmt="%.17g",
        )
        paths.append(path)
        rows.append(
            {
                "model": name,
                "accumulated_error_km": total * 1e-3,
                "final_position_error_km": final * 1e-3,
                "propagation_time_s": trajectory.wall_time,
            }
        )
    _write_rows(out / "trajectory_errors.csv", rows)
    return paths


def ablation_cells(config: ExperimentConfig) -> list[dict[str, float]]:
    """Cartesian product of the ablation axes, first axis slowest."""
    if config.ablation is None or not config.ablation.axes:
        raise ConfigError("Ablation grid is empty")
    names = list(config.ablation.axes)
    values = [config.ablation.axes[name] for name in names]
    if any(len(v) == 0 for v in values):
        raise ConfigError("Every ablation axis needs at least one value")
    return [dict(zip(names, combo, strict=True)) for combo in itertools.product(*values)]


def _run_cell(config: ExperimentConfig, cell: dict[str, float], index: int) -> dict[str, Any]:
    cell_config = config
    for dotted, value in cell.items():
        cell_config = set_field(cell_config, dotted, value)
    cell_config = set_field(cell_config, "hyperparams.seed", config.hyperparams.seed + index)
    truth = resolve_truth(cell_config.truth)
    data = generate_dataset(truth.model, truth.shape, cell_config.dataset, truth.config.truth_id)
    result = fit(cell_config, data, truth)
    metrics = cell_config.metrics.model_copy(update={"trajectory": False})
    report = evaluate_all(
        truth.model,
        result.model,
        truth.shape,
        metrics,
        truth.config.mu,
        name=f"cell{index}",
        regression_time_s=result.elapsed,
    )
    logger.info(f"Ablation cell {index} {cell}: exterior {report.exterior_pct}")
    return {"cell": index, **cell, **report.to_record()}


async def run_ablation(config: ExperimentConfig, workers: int = 1) -> list[dict[str, Any]]:
    """Run every ablation cell in worker threads, at most ``workers`` at a time, keeping grid order."""
    cells = ablation_cells(config)
    semaphore = asyncio.Semaphore(workers)

    async def run(index: int, cell: dict[str, float]) -> dict[str, Any]:
        async with semaphore:
            return await asyncio.to_thread(_run_cell, config, cell, index)

    return list(await asyncio.gather(*(run(i, cell) for i, cell in enumerate(cells))))


@command("ablate", "Fit and evaluate every cell of an ablation grid")
def cmd_ablate(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    options = options or CommandOptions()
    rows = asyncio.run(run_ablation(config, options.workers))
    path = output_dir(config) / "ablation.csv"
    _write_rows(path, rows)
    logger.info(f"Wrote {len(rows)} ablation rows to {path}")
    return path


def stage_config(config: ExperimentConfig, stage: str) -> ExperimentConfig:
    """Config of one modification-ladder rung; seeds and sizes are left untouched."""
    rung = LADDER[stage]
    model = config.model.model_copy(
        update={
            "kind": "pinn3",
            "feature_kind": rung["feature_kind"],
            "proxy": rung["proxy"],
            "boundary": rung["boundary"],
            "fusion": rung["fusion"],
        }
    )
    hyperparams = config.hyperparams.model_copy(update={"loss_kind": rung["loss"]})
    return config.model_copy(update={"model": model, "hyperparams": hyperparams})


@command("mods-study", "Train the modification ladder and report errors per stage")
def cmd_mods_study(config: ExperimentConfig, options: Optional[CommandOptions] = None) -> Path:
    options = options or CommandOptions()
    truth = resolve_truth(config.truth)
    data = dataset_for(config, truth, options)
    metrics = MetricSelection(
        planes=False,
        generalization=True,
        surface=False,
        trajectory=False,
        samples_per_radius=config.metrics.samples_per_radius,
        seed=config.metrics.seed,
    )
    rows = []
    for stage in config.mods_stages:
        result = fit_network(stage_config(config, stage), data, truth)
        report = evaluate_all(truth.model, result.model, truth.shape, metrics, truth.config.mu, name=stage)
        rows.append(
            {
                "stage": stage,
                "interior": report.interior_pct,
                "exterior": report.exterior_pct,
                "extrapolation": report.extrapolation_pct,
                "params": report.params,
            }
        )
    path = output_dir(config) / "mods_study.csv"
    _write_rows(path, rows)
    return path


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pinn-gravity", description="Gravity model training and evaluation")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, cmd in COMMANDS.items():
        sub = subparsers.add_parser(name, help=cmd.help)
        sub.add_argument("--config", default=None, help="Experiment config JSON")
        sub.add_argument("--seed", type=int, default=None, help="Override every seed in the config")
        sub.add_argument("--out", default=None, help="Override the output directory")
        sub.add_argument("--data", default=None, help="Use an existing dataset CSV")
        sub.add_argument("--bundle", action="append", default=[], help="Bundle directory (repeatable)")
        sub.add_argument("--workers", type=int, default=1, help="Concurrent ablation cells")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse ``argv``, run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = with_overrides(load_config(args.config), seed=args.seed, out=args.out)
        options = CommandOptions(data=args.data, bundles=args.bundle, workers=args.workers)
        COMMANDS[args.command].func(config, options)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"I/O error: {e}")
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except GravityModelError as e:
        logger.error(f"Numerical error: {e.message}")
        print(f"numerical error: {type(e).__name__}: {e.message}", file=sys.stderr)
        return EXIT_NUMERICAL
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"unexpected error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED
    return EXIT_OK
