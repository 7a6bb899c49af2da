import math
from enum import Enum
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class LossKind(str, Enum):
    """Loss functions available to the PINN training loop."""

    RMS = "rms"
    RMS_PCT = "rms_pct"
    AL = "al"


FeatureKind = Literal["pines", "radial", "cartesian"]
ModelKind = Literal["pinn3", "pinn2", "pinn1", "tnn", "sh", "mascon", "elm", "pm", "poly"]
SizePreset = Literal["small", "large", "custom"]


class BodyProperties(BaseModel):
    """Bulk properties of a body derived from its shape and gravitational parameter.

    Attributes:
        mu: Gravitational parameter
        R: Circumscribing (Brillouin) radius
        semi_axes: Principal half-extents, descending
        eccentricity: ``sqrt(1 - b**2 / a**2)``
    """

    model_config = ConfigDict(frozen=True)

    mu: float = Field(..., gt=0, description="Gravitational parameter [length^3/time^2]")
    R: float = Field(..., gt=0, description="Circumscribing radius [length]")
    semi_axes: tuple[float, float, float] = Field(..., description="Principal half-extents a >= b >= c")
    eccentricity: float = Field(..., ge=0, lt=1, description="Body eccentricity from the two largest semi-axes")

    @model_validator(mode="after")
    def _check_axes(self) -> "BodyProperties":
        a_ax, b_ax, c_ax = self.semi_axes
        if not a_ax >= b_ax >= c_ax > 0:
            raise ValueError(f"semi_axes must be positive and descending, got {self.semi_axes}")
        expected = math.sqrt(max(0.0, 1.0 - b_ax**2 / a_ax**2))
        if abs(expected - self.eccentricity) > 1e-9:
            raise ValueError(f"eccentricity {self.eccentricity} does not match semi-axes ({expected})")
        return self


class NonDimConstants(BaseModel):
    """Characteristic scales used to non-dimensionalize positions, potentials and accelerations."""

    model_config = ConfigDict(frozen=True)

    x_star: float = Field(..., gt=0, description="Characteristic length, equal to R")
    U_star: float = Field(..., gt=0, description="Characteristic potential")
    t_star: float = Field(..., gt=0, description="Characteristic time sqrt(x*^2 / U*)")
    a_star: float = Field(..., gt=0, description="Characteristic acceleration x* / t*^2")

    @classmethod
    def from_scales(cls, x_star: float, U_star: float) -> "NonDimConstants":
        """Derive the time and acceleration scales from the length and potential scales."""
        t_star = math.sqrt(x_star**2 / U_star)
        return cls(x_star=x_star, U_star=U_star, t_star=t_star, a_star=x_star / t_star**2)

    @model_validator(mode="after")
    def _check_derived(self) -> "NonDimConstants":
        if not math.isclose(self.a_star, self.U_star / self.x_star, rel_tol=1e-9):
            raise ValueError("a_star must equal U_star / x_star")
        return self


class LowFidelityModel(BaseModel):
    """A-priori analytic potential: point mass plus an optional unnormalized C20 term."""

    model_config = ConfigDict(frozen=True)

    mu: float = Field(..., gt=0, description="Gravitational parameter")
    radius: float = Field(..., gt=0, description="Reference radius of the C20 term")
    c20: float = Field(0.0, description="Unnormalized C20 coefficient (-J2)")


class BoundaryConfig(BaseModel):
    """Blend between the network potential and the analytic boundary potential."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = Field(True, description="Whether boundary blending is applied")
    r_ref: float = Field(10.0, ge=1.0, description="Non-dimensional reference radius")
    k: float = Field(2.0, gt=0, description="Transition sharpness")


class FusionConfig(BaseModel):
    """Fusion of a down-weighted low-fidelity potential with the learned residual."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = Field(True, description="Whether the low-fidelity potential is fused")
    R_star: float = Field(1.0, gt=0, description="Non-dimensional radius where w_LF = 0.5")
    k_star: float = Field(0.5, gt=0, description="Transition sharpness of w_LF")
    lf_model: LowFidelityModel

    @classmethod
    def from_body(cls, body: BodyProperties, enabled: bool = True, c20: float = 0.0) -> "FusionConfig":
        """Build the default fusion for a body: ``R* = 1 + e``, ``k* = 0.5``, point-mass LF."""
        return cls(
            enabled=enabled,
            R_star=1.0 + body.eccentricity,
            k_star=0.5,
            lf_model=LowFidelityModel(mu=body.mu, radius=body.R, c20=c20),
        )


class Architecture(BaseModel):
    """Shape of the network.

    Attributes:
        depth: Number of hidden layers, the embedding layer included
        width: Nodes per hidden layer
        feature_dim: Input features
        output_dim: Network outputs (1 for a potential, 3 for a direct acceleration regressor)
        transition: Whether the two trainable transition scalars ``(k, r_ref)`` are part of the parameters
        gated: Gated GELU network with two input encoders; a plain dense tanh MLP when off
        seed: Initialization seed
    """

    model_config = ConfigDict(frozen=True)

    depth: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    feature_dim: int = Field(5, ge=1)
    output_dim: int = Field(1, ge=1)
    transition: bool = True
    gated: bool = True
    seed: int = 0

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        """Names and shapes of every tensor, in the order they sit in the flat vector."""
        f, w = self.feature_dim, self.width
        entries: list[tuple[str, tuple[int, ...]]] = []
        if self.gated:
            entries += [
                ("encoder_u.weight", (w, f)),
                ("encoder_u.bias", (w,)),
                ("encoder_v.weight", (w, f)),
                ("encoder_v.bias", (w,)),
                ("embedding.weight", (w, f)),
                ("embedding.bias", (w,)),
            ]
            for i in range(self.depth - 1):
                entries.append((f"hidden.{i}.weight", (w, w)))
                entries.append((f"hidden.{i}.bias", (w,)))
        else:
            for i in range(self.depth):
                entries.append((f"hidden.{i}.weight", (w, f if i == 0 else w)))
                entries.append((f"hidden.{i}.bias", (w,)))
        entries.append(("output.weight", (self.output_dim, w)))
        entries.append(("output.bias", (self.output_dim,)))
        if self.transition:
            entries.append(("transition", (2,)))
        return entries

    @property
    def param_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())


class Hyperparams(BaseModel):
    """Training hyperparameters. Defaults are the recommended PINN settings."""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(2.0**-8, gt=0)
    batch_size: int = Field(2**11, gt=0)
    num_epochs: int = Field(2**13, ge=0)
    lr_patience: int = Field(1500, gt=0)
    decay_rate: float = Field(0.5, gt=0, lt=1)
    min_delta: float = Field(0.001, gt=0)
    min_lr: float = Field(1e-6, gt=0)
    early_stop_patience: int = Field(3000, gt=0)
    loss_kind: LossKind = LossKind.RMS_PCT
    validation_fraction: float = Field(0.1, gt=0, lt=1)
    train_transition: bool = Field(True, description="Whether the transition scalars (k, r_ref) are optimized")
    log_every: int = Field(500, gt=0)
    seed: int = 0


class TrainHistory(BaseModel):
    """Per-epoch record of a training run."""

    epoch: list[int] = Field(default_factory=list)
    train_loss: list[float] = Field(default_factory=list)
    val_loss: list[float] = Field(default_factory=list)
    lr: list[float] = Field(default_factory=list)
    wall_time: list[float] = Field(default_factory=list)
    best_epoch: Optional[int] = None

    def append(self, epoch: int, train_loss: float, val_loss: float, lr: float, wall_time: float) -> None:
        self.epoch.append(epoch)
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.lr.append(lr)
        self.wall_time.append(wall_time)

    def __len__(self) -> int:
        return len(self.epoch)


class DatasetMeta(BaseModel):
    """Provenance of a dataset."""

    seed: int = 0
    r_min: float = Field(0.0, ge=0, description="Lower radius of the shell band [length]")
    r_max: float = Field(0.0, ge=0, description="Upper radius of the shell band [length]")
    surface_n: int = Field(0, ge=0)
    noise: float = Field(0.0, ge=0, description="Noise fraction of the acceleration magnitude")
    truth_id: str = "unknown"


class TrajectoryConfig(BaseModel):
    """Orbit and body rotation used by the trajectory metrics. Angles in degrees."""

    model_config = ConfigDict(frozen=True)

    a_sma: float = Field(32_000.0, gt=0, description="Semi-major axis [length]")
    ecc: float = Field(0.1, ge=0, lt=1)
    inc: float = 90.0
    argp: float = 0.0
    raan: float = 0.0
    mean_anom: float = 0.0
    omega0: float = Field(0.00073, description="Body spin rate about z [deg/s]")
    duration: float = Field(86_400.0, gt=0, description="Propagation time [s]")
    sample_count: int = Field(1000, ge=2, description="Evenly spaced comparison samples")
    rtol: float = Field(1e-10, gt=0)
    atol: float = Field(1e-12, gt=0)
    truth_rtol: float = Field(1e-12, gt=0)


class PlaneStats(BaseModel):
    mean: float
    std: float
    max: float
    count: int


class MetricsReport(BaseModel):
    """The seven-metric evaluation of one model against one truth field.

    Missing metrics are ``None`` and rendered as ``NA`` in comparison tables.
    """

    model: str = "model"
    planes_pct: Optional[float] = Field(None, ge=0)
    interior_pct: Optional[float] = Field(None, ge=0)
    exterior_pct: Optional[float] = Field(None, ge=0)
    extrapolation_pct: Optional[float] = Field(None, ge=0)
    surface_pct: Optional[float] = Field(None, ge=0)
    accumulated_error_km: Optional[float] = Field(None, ge=0)
    final_position_error_km: Optional[float] = Field(None, ge=0)
    propagation_time_s: Optional[float] = Field(None, ge=0)
    params: Optional[int] = None
    regression_time_s: Optional[float] = None
    planes_detail: dict[str, PlaneStats] = Field(default_factory=dict)
    excluded: dict[str, int] = Field(default_factory=dict)

    @property
    def diverged(self) -> dict[str, bool]:
        """Divergence flag ``D`` per percentage regime: mean error above 100 %."""
        regimes = {
            "planes": self.planes_pct,
            "interior": self.interior_pct,
            "exterior": self.exterior_pct,
            "extrapolation": self.extrapolation_pct,
            "surface": self.surface_pct,
        }
        return {name: value is not None and value > 100.0 for name, value in regimes.items()}

    def to_record(self) -> dict:
        """Flat key-value record, divergence flags included."""
        record = self.model_dump(exclude={"planes_detail", "excluded"})
        for name, stats in self.planes_detail.items():
            for key, value in stats.model_dump().items():
                record[f"planes_{name}_{key}"] = value
        for name, count in self.excluded.items():
            record[f"excluded_{name}"] = count
        for name, flag in self.diverged.items():
            record[f"diverged_{name}"] = flag
        return record


class AnomalySpec(BaseModel):
    position: tuple[float, float, float] = Field(..., description="Position in body radii")
    mu_fraction: float = Field(..., description="Signed fraction of the total gravitational parameter")


class TruthConfig(BaseModel):
    """Truth gravity field: a constant-density polyhedron plus point-mass anomalies."""

    shape: str = Field("builtin:eros_coarse", min_length=1, description="'builtin:<name>' or a path to an .obj file")
    mu: float = Field(4.4631e5, gt=0)
    anomalies: list[AnomalySpec] = Field(
        default_factory=lambda: [
            AnomalySpec(position=(0.5, 0.0, 0.0), mu_fraction=0.1),
            AnomalySpec(position=(-0.5, 0.0, 0.0), mu_fraction=-0.1),
        ]
    )

    @property
    def truth_id(self) -> str:
        suffix = "hetero" if self.anomalies else "constant"
        return f"{self.shape}:{suffix}"


class DatasetSpec(BaseModel):
    n: int = Field(4096, ge=0)
    r_min: float = Field(0.0, ge=0, description="Lower shell radius in body radii")
    r_max: float = Field(10.0, gt=0, description="Upper shell radius in body radii")
    surface_n: int = Field(0, ge=0)
    noise: float = Field(0.0, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_band(self) -> "DatasetSpec":
        if self.r_min >= self.r_max:
            raise ValueError(f"r_min ({self.r_min}) must be below r_max ({self.r_max})")
        if self.n + self.surface_n == 0:
            raise ValueError("dataset must contain at least one sample")
        return self


class ModelSpec(BaseModel):
    """What to fit and at what capacity. Explicit sizes override the preset."""

    kind: ModelKind = "pinn3"
    size: SizePreset = "small"
    depth: Optional[int] = Field(None, ge=1)
    width: Optional[int] = Field(None, ge=1)
    l_max: Optional[int] = Field(None, ge=0)
    n_mascons: Optional[int] = Field(None, ge=1)
    n_hidden: Optional[int] = Field(None, ge=1)
    alpha: Optional[float] = Field(None, ge=0)
    param_budget: Optional[int] = Field(None, gt=0)
    boundary: bool = True
    fusion: bool = True
    proxy: bool = True
    feature_kind: FeatureKind = "pines"
    k: float = Field(2.0, gt=0)
    r_ref: Optional[float] = Field(None, ge=1.0, description="Non-dimensional; defaults to the training band maximum")
    c20: float = 0.0


class MetricSelection(BaseModel):
    planes: bool = True
    generalization: bool = True
    surface: bool = True
    trajectory: bool = True
    grid_resolution: int = Field(200, ge=2)
    samples_per_radius: int = Field(500, ge=1)
    orbit: TrajectoryConfig = Field(default_factory=TrajectoryConfig)
    seed: int = 0


class AblationGrid(BaseModel):
    """Cartesian grid over ``ModelSpec``/``Hyperparams``/``DatasetSpec`` fields."""

    axes: dict[str, list[float]] = Field(default_factory=dict)


class ExperimentConfig(BaseModel):
    """Everything one command needs, round-trippable through JSON."""

    truth: TruthConfig = Field(default_factory=TruthConfig)
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    hyperparams: Hyperparams = Field(default_factory=Hyperparams)
    metrics: MetricSelection = Field(default_factory=MetricSelection)
    ablation: Optional[AblationGrid] = None
    mods_stages: list[Literal["baseline", "I", "II", "III", "IV", "V"]] = Field(
        default_factory=lambda: ["baseline", "I", "II", "III", "IV", "V"]
    )
    bundles: list[str] = Field(default_factory=list, description="Bundle directories for evaluate/compare")
    out_dir: str = "runs"

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "truth": {"shape": "builtin:eros_coarse", "mu": 4.4631e5},
                "dataset": {"n": 500, "r_min": 0.0, "r_max": 10.0, "seed": 7},
                "model": {"kind": "pinn3", "size": "small"},
                "out_dir": "runs/example",
            }
        }
    )
