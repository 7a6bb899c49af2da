"""
Evaluation metrics and the rotating-body orbit propagator.

Every percent metric is the mean of ``|a_true - a_model| / |a_true| * 100`` over its points. Points where the truth
acceleration vanishes are excluded and counted, as are points inside the body or on its surface for the planes and
interior regimes.
"""

import csv
import hashlib
import io
import json
import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import numpy.typing as npt
from scipy.integrate import RK45
from scipy.spatial.transform import Rotation

from pinn_gravity._types import FloatArray, GravityModel, as_points
from pinn_gravity.errors import GravityModelError, KeplerError, PropagationError
from pinn_gravity.geometry import ShapeModel, facet_centroids, interior_mask, on_surface_mask, sample_shell
from pinn_gravity.models import MetricSelection, MetricsReport, PlaneStats, TrajectoryConfig

logger = logging.getLogger(__name__)

KEPLER_TOL = 1e-12
KEPLER_MAX_ITER = 50
SURFACE_LIFT = 1e-6
PLANE_EXTENT = 5.0
GENERALIZATION_BANDS = {"interior": (0.0, 1.0), "exterior": (1.0, 10.0), "extrapolation": (10.0, 100.0)}
TABLE_COLUMNS = (
    "model",
    "planes",
    "extrapolation",
    "exterior",
    "interior",
    "surface",
    "position_error_km",
    "final_position_error_km",
    "propagation_time_s",
    "params",
    "regression_time_s",
)
# Unit directions at which a model's field is sampled to fingerprint it.
FINGERPRINT_DIRECTIONS = np.array(
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, -0.48, 0.64], [-0.36, 0.48, -0.8]]
)


@dataclass(frozen=True)
class PercentError:
    """Per-point percent errors with the number of points left out for a vanishing truth acceleration."""

    values: FloatArray
    excluded: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean(self.values)) if len(self.values) else math.nan


def percent_errors(a_true: FloatArray, a_model: FloatArray) -> PercentError:
    norms = np.linalg.norm(a_true, axis=1)
    keep = norms > 0.0
    excluded = int((~keep).sum())
    if excluded:
        logger.warning(f"Excluded {excluded} points with zero truth acceleration")
    values = np.linalg.norm(a_true[keep] - a_model[keep], axis=1) / norms[keep] * 100.0
    return PercentError(values=values, excluded=excluded)


def percent_error(truth: GravityModel, model: GravityModel, points: npt.ArrayLike) -> float:
    """Mean percent acceleration error of ``model`` against ``truth``."""
    pts = as_points(points)
    if len(pts) == 0:
        raise ValueError("percent_error needs at least one point")
    return percent_errors(truth.evaluate(pts).acceleration, model.evaluate(pts).acceleration).mean


def _outside(shape: Optional[ShapeModel], points: FloatArray) -> tuple[npt.NDArray[np.bool_], int]:
    """Mask of points neither inside nor on ``shape``, and how many of the dropped points lie on the surface."""
    keep = np.ones(len(points), dtype=bool)
    if shape is None:
        return keep, 0
    # Only points within the circumscribing sphere can be inside or on the surface.
    near = np.flatnonzero(np.linalg.norm(points, axis=1) <= shape.radius)
    if len(near) == 0:
        return keep, 0
    surface = on_surface_mask(shape, points[near])
    inside = np.zeros(len(near), dtype=bool)
    inside[~surface] = interior_mask(shape, points[near[~surface]])
    keep[near] = ~(inside | surface)
    return keep, int(surface.sum())


def plane_grids(R: float, resolution: int = 200, extent: float = PLANE_EXTENT) -> dict[str, FloatArray]:
    """Square grids over ``[-extent R, extent R]`` in the XY, XZ and YZ planes."""
    ticks = np.linspace(-extent * R, extent * R, resolution)
    u, v = (g.reshape(-1) for g in np.meshgrid(ticks, ticks, indexing="ij"))
    zero = np.zeros_like(u)
    return {
        "xy": np.column_stack([u, v, zero]),
        "xz": np.column_stack([u, zero, v]),
        "yz": np.column_stack([zero, u, v]),
    }


def _planes(
    truth: GravityModel,
    model: GravityModel,
    R: float,
    shape: Optional[ShapeModel],
    resolution: int,
) -> tuple[float, dict[str, PlaneStats], dict[str, int]]:
    details: dict[str, PlaneStats] = {}
    excluded = {"planes_interior": 0, "planes_on_surface": 0, "planes_zero_truth": 0}
    errors = []
    for name, grid in plane_grids(R, resolution).items():
        keep, on_surface = _outside(shape, grid)
        excluded["planes_interior"] += int((~keep).sum()) - on_surface
        excluded["planes_on_surface"] += on_surface
        points = grid[keep]
        result = percent_errors(truth.evaluate(points).acceleration, model.evaluate(points).acceleration)
        excluded["planes_zero_truth"] += result.excluded
        errors.append(result.values)
        details[name] = PlaneStats(
            mean=result.mean,
            std=float(np.std(result.values)),
            max=float(np.max(result.values)),
            count=len(result.values),
        )
    return float(np.mean(np.concatenate(errors))), details, excluded


def planes_metric(
    truth: GravityModel,
    model: GravityModel,
    R: float,
    shape: Optional[ShapeModel] = None,
    resolution: int = 200,
) -> float:
    """
    Mean percent error over three ``resolution x resolution`` grids spanning ``[-5R, 5R]``.

    Grid points strictly inside ``shape`` are excluded when a shape is given.
    """
    return _planes(truth, model, R, shape, resolution)[0]


def generalization_points(
    R: float,
    samples_per_radius: int = 500,
    seed: int = 0,
) -> dict[str, FloatArray]:
    """Seeded sample points of each generalization band, ``samples_per_radius`` per body radius of band width."""
    points = {}
    for offset, (name, (low, high)) in enumerate(GENERALIZATION_BANDS.items()):
        n = round(samples_per_radius * (high - low))
        points[name] = sample_shell(R, low * R, high * R, n, seed + offset)
    return points


def _generalization(
    truth: GravityModel,
    model: GravityModel,
    R: float,
    shape: Optional[ShapeModel],
    samples_per_radius: int,
    seed: int,
) -> tuple[dict[str, float], dict[str, int]]:
    results, excluded = {}, {}
    for name, points in generalization_points(R, samples_per_radius, seed).items():
        if name == "interior":
            keep, _ = _outside(shape, points)
            excluded["interior_inside_body"] = int((~keep).sum())
            points = points[keep]
        if len(points) == 0:
            results[name] = math.nan
            continue
        result = percent_errors(truth.evaluate(points).acceleration, model.evaluate(points).acceleration)
        if result.excluded:
            excluded[f"{name}_zero_truth"] = result.excluded
        results[name] = result.mean
    return results, excluded


def generalization_metric(
    truth: GravityModel,
    model: GravityModel,
    R: float,
    shape: Optional[ShapeModel] = None,
    samples_per_radius: int = 500,
    seed: int = 0,
) -> tuple[float, float, float]:
    """
    Mean percent errors over the interior ``[0, R]``, exterior ``[R, 10R]`` and extrapolation ``[10R, 100R]`` bands.

    Interior-band points inside ``shape`` are excluded.
    """
    results, _ = _generalization(truth, model, R, shape, samples_per_radius, seed)
    return results["interior"], results["exterior"], results["extrapolation"]


def surface_points(shape: ShapeModel, lift: float = SURFACE_LIFT) -> FloatArray:
    """Facet centroids lifted ``lift * R`` along the outward normals."""
    return facet_centroids(shape) + lift * shape.radius * shape.facet_normals


def surface_metric(truth: GravityModel, model: GravityModel, shape: ShapeModel) -> float:
    """Mean percent error just above every facet centroid."""
    return percent_error(truth, model, surface_points(shape))


# ---------------------------------------------------------------------------
# Orbits
# ---------------------------------------------------------------------------


def solve_kepler(mean_anomaly: float, ecc: float) -> float:
    """Eccentric anomaly by Newton iteration on ``E - e sin E = M``."""
    M = math.remainder(mean_anomaly, 2.0 * math.pi)
    E = M if ecc < 0.8 else M + 0.85 * ecc * math.copysign(1.0, math.sin(M))
    for _ in range(KEPLER_MAX_ITER):
        step = (E - ecc * math.sin(E) - M) / (1.0 - ecc * math.cos(E))
        E -= step
        if abs(step) < KEPLER_TOL:
            return E
    raise KeplerError(f"Kepler's equation did not converge for M={mean_anomaly}, e={ecc}")


def elements_to_state(elements: TrajectoryConfig, mu: float) -> tuple[FloatArray, FloatArray]:
    """
    Inertial position and velocity from classical orbital elements.

    Args:
        elements: Semi-major axis, eccentricity and angles in degrees
        mu: Gravitational parameter of the central body

    Raises:
        KeplerError: If Kepler's equation does not converge
    """
    a, e = elements.a_sma, elements.ecc
    if not 0.0 <= e < 1.0:
        raise ValueError(f"Expected an elliptic orbit, got e={e}")
    E = solve_kepler(math.radians(elements.mean_anom), e)
    root = math.sqrt(1.0 - e * e)
    r = a * (1.0 - e * math.cos(E))
    r_pf = np.array([a * (math.cos(E) - e), a * root * math.sin(E), 0.0])
    v_pf = math.sqrt(mu * a) / r * np.array([-math.sin(E), root * math.cos(E), 0.0])
    rotation = Rotation.from_euler("ZXZ", [elements.raan, elements.inc, elements.argp], degrees=True)
    return rotation.apply(r_pf), rotation.apply(v_pf)


def orbital_period(a_sma: float, mu: float) -> float:
    return 2.0 * math.pi * math.sqrt(a_sma**3 / mu)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """
    Inertial states sampled on a fixed time grid.

    Attributes:
        times: Sample times ``(T,)``
        states: Position and velocity ``(T, 6)``
        wall_time: Wall-clock seconds spent integrating
    """

    times: FloatArray
    states: FloatArray
    wall_time: float = 0.0

    @property
    def positions(self) -> FloatArray:
        return self.states[:, :3]

    def __len__(self) -> int:
        return len(self.times)


def _spin(angle: float) -> FloatArray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def propagate(
    model: GravityModel,
    config: TrajectoryConfig,
    mu: float,
    rtol: Optional[float] = None,
    atol: Optional[float] = None,
) -> Trajectory:
    """
    Integrate an orbit through the field of a body spinning about its z axis.

    The state lives in the inertial frame. At time ``t`` the field point is rotated by ``-omega0 t`` into the body
    frame, evaluated, and the acceleration rotated back. Integration is Dormand-Prince 5(4), sampled on the fixed
    time grid through each step's dense output.

    Args:
        model: Gravity model in the body frame
        config: Initial orbit, spin rate, duration and tolerances
        mu: Gravitational parameter used to convert the orbital elements
        rtol: Overrides ``config.rtol``
        atol: Overrides ``config.atol``

    Raises:
        PropagationError: If the integrator or a gravity evaluation fails; carries the samples reached so far
    """
    r0, v0 = elements_to_state(config, mu)
    omega = math.radians(config.omega0)
    times = np.linspace(0.0, config.duration, config.sample_count)

    def rhs(t: float, state: FloatArray) -> FloatArray:
        spin = _spin(omega * t)
        body_point = spin.T @ state[:3]
        acceleration = model.evaluate(body_point).acceleration[0]
        return np.concatenate([state[3:], spin @ acceleration])

    start = time.perf_counter()
    y0 = np.concatenate([r0, v0])
    samples = [y0]

    def reached() -> Trajectory:
        return Trajectory(times=times[: len(samples)], states=np.array(samples), wall_time=time.perf_counter() - start)

    try:
        solver = RK45(
            rhs,
            0.0,
            y0,
            config.duration,
            rtol=config.rtol if rtol is None else rtol,
            atol=config.atol if atol is None else atol,
        )
        while len(samples) < len(times):
            message = solver.step()
            if solver.status == "failed":
                raise PropagationError(f"Integration stopped at t={solver.t:.6g}: {message}", trajectory=reached())
            dense = solver.dense_output()
            while len(samples) < len(times) and times[len(samples)] <= solver.t:
                samples.append(dense(times[len(samples)]))
    except PropagationError:
        raise
    except GravityModelError as e:
        raise PropagationError(
            f"Gravity evaluation failed during propagation after {len(samples)} samples: {e.message}",
            trajectory=reached(),
        ) from e
    trajectory = reached()
    logger.debug(f"Propagated {config.duration:.6g} s in {trajectory.wall_time:.3f} s ({solver.nfev} evaluations)")
    return trajectory


def field_fingerprint(model: GravityModel, scale: float) -> str:
    """Digest of the model type and its accelerations at fixed points one and two ``scale`` out."""
    points = np.concatenate([FINGERPRINT_DIRECTIONS * scale, FINGERPRINT_DIRECTIONS * 2.0 * scale])
    digest = hashlib.sha256(type(model).__qualname__.encode())
    digest.update(np.ascontiguousarray(model.evaluate(points).acceleration, dtype=np.float64).tobytes())
    return digest.hexdigest()


@dataclass
class TruthTrajectoryCache:
    """Truth trajectories integrated once per field and orbit at the truth tolerance and reused for every model."""

    entries: dict[tuple[str, str, float], Trajectory] = field(default_factory=dict)

    def get(self, truth: GravityModel, config: TrajectoryConfig, mu: float) -> Trajectory:
        key = (field_fingerprint(truth, config.a_sma), config.model_dump_json(), mu)
        if key not in self.entries:
            logger.info(f"Integrating truth trajectory over {config.duration:.6g} s")
            self.entries[key] = propagate(truth, config, mu, rtol=config.truth_rtol, atol=min(config.atol, 1e-12))
        return self.entries[key]


def accumulated_error(trajectory: Trajectory, truth: Trajectory) -> tuple[float, float]:
    """
    Sum of position errors over the common sample grid and the error at the last sample.

    Both values are in the trajectories' length unit.

    Raises:
        ValueError: If the trajectories are sampled at different times
    """
    if trajectory.times.shape != truth.times.shape or not np.allclose(trajectory.times, truth.times, rtol=0, atol=1e-9):
        raise ValueError("Trajectories are not sampled on the same time grid")
    errors = np.linalg.norm(trajectory.positions - truth.positions, axis=1)
    return float(errors.sum()), float(errors[-1])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def evaluate_all(
    truth: GravityModel,
    model: GravityModel,
    shape: ShapeModel,
    config: MetricSelection,
    mu: float,
    name: str = "model",
    cache: Optional[TruthTrajectoryCache] = None,
    length_to_km: float = 1e-3,
    regression_time_s: Optional[float] = None,
) -> MetricsReport:
    """
    Run the selected metrics of ``model`` against ``truth``.

    Args:
        truth: Reference field
        model: Model under test
        shape: Body shape, used for interior exclusion and the surface metric
        config: Which metrics to run and their resolution
        mu: Body gravitational parameter for the orbit initial state
        name: Row name in comparison tables
        cache: Shared truth trajectories
        length_to_km: Factor converting model lengths to kilometres
        regression_time_s: Fit time carried into the report
    """
    R = shape.radius
    report = {"model": name, "params": model.param_count, "regression_time_s": regression_time_s}
    excluded: dict[str, int] = {}
    if config.planes:
        report["planes_pct"], report["planes_detail"], counts = _planes(truth, model, R, shape, config.grid_resolution)
        excluded.update(counts)
    if config.generalization:
        results, counts = _generalization(truth, model, R, shape, config.samples_per_radius, config.seed)
        excluded.update(counts)
        for regime, value in results.items():
            report[f"{regime}_pct"] = None if math.isnan(value) else value
    if config.surface:
        report["surface_pct"] = surface_metric(truth, model, shape)
    if config.trajectory:
        cache = cache or TruthTrajectoryCache()
        truth_trajectory = cache.get(truth, config.orbit, mu)
        trajectory = propagate(model, config.orbit, mu)
        total, final = accumulated_error(trajectory, truth_trajectory)
        report["accumulated_error_km"] = total * length_to_km
        report["final_position_error_km"] = final * length_to_km
        report["propagation_time_s"] = trajectory.wall_time
    metrics = MetricsReport(**report, excluded=excluded)
    flagged = [regime for regime, flag in metrics.diverged.items() if flag]
    logger.info(f"Evaluated {name}: {metrics.model_dump(exclude={'planes_detail', 'excluded'})}; diverged={flagged}")
    return metrics


def _cell(value: Optional[float], diverged: bool = False) -> str:
    if value is None:
        return "NA"
    if diverged:
        return "D"
    return f"{value:.6g}"


def comparison_table(reports: Sequence[MetricsReport], mark_diverged: bool = False) -> str:
    """
    One CSV row per report, in the given order. Missing metrics render as ``NA``.

    With ``mark_diverged`` percentages above 100 render as ``D``.
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for report in reports:
        flags = report.diverged if mark_diverged else {}
        writer.writerow(
            [
                report.model,
                _cell(report.planes_pct, flags.get("planes", False)),
                _cell(report.extrapolation_pct, flags.get("extrapolation", False)),
                _cell(report.exterior_pct, flags.get("exterior", False)),
                _cell(report.interior_pct, flags.get("interior", False)),
                _cell(report.surface_pct, flags.get("surface", False)),
                _cell(report.accumulated_error_km),
                _cell(report.final_position_error_km),
                _cell(report.propagation_time_s),
                "NA" if report.params is None else str(report.params),
                _cell(report.regression_time_s),
            ]
        )
    return buffer.getvalue()


def write_report(report: MetricsReport, path: Union[str, Path]) -> None:
    """Write the flat key-value record of ``report`` as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_record(), indent=2))
