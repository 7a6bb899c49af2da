"""
The physics-informed gravity pipeline.

Positions are non-dimensionalized by ``x* = R`` and potentials by ``U*``. The network sees bounded features,
its output is unscaled into a proxy potential, fused with a down-weighted low-fidelity potential and blended into an
analytic boundary condition at high altitude. Accelerations are the position gradient of the whole pipeline.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Literal, Optional

import numpy as np
import numpy.typing as npt
import torch
from torch.func import jacfwd, vmap

from pinn_gravity._types import DTYPE, Dataset, FloatArray, GravityEval, as_points
from pinn_gravity.analytic import low_fidelity_sh
from pinn_gravity.errors import NonFiniteError, ScalingError, SingularityError
from pinn_gravity.models import (
    Architecture,
    BodyProperties,
    BoundaryConfig,
    FeatureKind,
    FusionConfig,
    LossKind,
    LowFidelityModel,
    NonDimConstants,
)
from pinn_gravity.network import MlpParams, apply, init_params, transition_scalars

logger = logging.getLogger(__name__)

FEATURE_DIMS: dict[str, int] = {"pines": 5, "radial": 4, "cartesian": 3}
# Points per vectorised evaluation chunk.
EVAL_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class PinnModel:
    """
    A deployable physics-informed gravity model.

    Attributes:
        params: Network parameters; the trailing pair decodes to the boundary transition ``(k, r_ref)`` when present
        constants: Non-dimensionalization scales
        boundary: Boundary blending configuration, kept in sync with the transition parameters
        fusion: Low-fidelity fusion configuration
        feature_kind: Network inputs: ``pines`` ``(r_i, r_e, s, t, u)``, ``radial`` ``(r, s, t, u)`` or
            ``cartesian`` ``(x, y, z)``
        proxy: Whether the network output is unscaled as a proxy potential
    """

    params: MlpParams
    constants: NonDimConstants
    boundary: BoundaryConfig
    fusion: FusionConfig
    feature_kind: FeatureKind = "pines"
    proxy: bool = True

    @property
    def param_count(self) -> int:
        return self.params.architecture.param_count

    def with_params(self, flat: torch.Tensor) -> "PinnModel":
        """New model with ``flat`` parameters; the boundary config picks up the trained transition scalars."""
        params = self.params.replace(flat)
        boundary = self.boundary
        if params.architecture.transition:
            k, r_ref = (float(v) for v in transition_scalars(params.flat[-2:]))
            boundary = BoundaryConfig(enabled=self.boundary.enabled, k=k, r_ref=r_ref)
        return PinnModel(
            params=params,
            constants=self.constants,
            boundary=boundary,
            fusion=self.fusion,
            feature_kind=self.feature_kind,
            proxy=self.proxy,
        )

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return GravityEval(
            potential=pinn_potential(self, points),
            acceleration=pinn_acceleration(self, points),
        )


def compute_constants(
    training_set: Dataset,
    body: BodyProperties,
    lf_model: Optional[LowFidelityModel] = None,
) -> NonDimConstants:
    """
    Characteristic scales: ``x* = R`` and ``U* = max(U_true - U_LF)`` over the training data.

    Without potential labels ``U* = mu / R``.

    Raises:
        ScalingError: If the low-fidelity potential exceeds the truth everywhere
    """
    x_star = body.R
    if training_set.potentials is None:
        logger.warning("Training data has no potential labels; falling back to U* = mu / R")
        return NonDimConstants.from_scales(x_star, body.mu / body.R)
    potentials = training_set.potentials
    if lf_model is not None:
        potentials = potentials - low_fidelity_sh(lf_model).evaluate(training_set.positions).potential
    U_star = float(np.max(potentials))
    floor = 1e-12 * float(np.max(np.abs(training_set.potentials)))
    if U_star <= floor:
        raise ScalingError(
            f"U* = {U_star:.3g} is not positive: the low-fidelity model exceeds the truth everywhere. "
            "Exclude it from the maximum by disabling fusion."
        )
    logger.info(f"Non-dimensional scales x*={x_star:.6g}, U*={U_star:.6g}")
    return NonDimConstants.from_scales(x_star, U_star)


def feature_map(x: torch.Tensor, kind: FeatureKind = "pines") -> torch.Tensor:
    """Network inputs for non-dimensional positions ``(..., 3)``; differentiable, exterior branch at ``r = 1``."""
    if kind == "cartesian":
        return x
    r = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    stu = x / r
    if kind == "radial":
        return torch.cat([r, stu], dim=-1)
    one = torch.ones_like(r)
    r_i = torch.where(r < 1.0, r, one)
    r_e = torch.where(r < 1.0, one, 1.0 / r)
    return torch.cat([r_i, r_e, stu], dim=-1)


def features(x_nondim: npt.ArrayLike) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Pines features ``(r_i, r_e, s, t, u)`` and their analytic Jacobian with respect to position.

    Args:
        x_nondim: Non-dimensional position ``(3,)`` or positions ``(N, 3)``

    Returns:
        Features ``(..., 5)`` and Jacobian ``(..., 5, 3)``

    Raises:
        SingularityError: At the origin
    """
    x = torch.as_tensor(np.asarray(x_nondim, dtype=np.float64), dtype=DTYPE)
    r = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if torch.any(r == 0.0):
        raise SingularityError("Features are undefined at the origin")
    feat = feature_map(x, "pines")
    x_hat = x / r
    eye = torch.eye(3, dtype=DTYPE).expand(*x.shape[:-1], 3, 3)
    d_stu = (eye - x_hat[..., :, None] * x_hat[..., None, :]) / r[..., None]
    interior = (r < 1.0)[..., None]
    d_r = x_hat[..., None, :]
    d_ri = torch.where(interior, d_r, torch.zeros_like(d_r))
    d_re = torch.where(interior, torch.zeros_like(d_r), -d_r / (r[..., None] ** 2))
    return feat, torch.cat([d_ri, d_re, d_stu], dim=-2)


def unscale_proxy(U_nn: torch.Tensor, r_nondim: torch.Tensor) -> torch.Tensor:
    """``U_NN / n(r)`` with ``n = 1`` inside the unit sphere and ``n = r`` outside."""
    return U_nn / torch.where(r_nondim < 1.0, torch.ones_like(r_nondim), r_nondim)


def transition(r: torch.Tensor, k: torch.Tensor | float, r_ref: torch.Tensor | float) -> torch.Tensor:
    """Smooth step ``(1 + tanh(k (r - r_ref))) / 2``."""
    r = torch.as_tensor(r, dtype=DTYPE)
    return 0.5 * (1.0 + torch.tanh(k * (r - r_ref)))


def lf_potential_nd(x: torch.Tensor, lf: LowFidelityModel, constants: NonDimConstants) -> torch.Tensor:
    """Non-dimensional point mass plus C20 potential ``mu/r (1 + C20 (R/r)^2 P2(u))``."""
    r = torch.linalg.vector_norm(x, dim=-1)
    mu_nd = lf.mu / (constants.U_star * constants.x_star)
    R_nd = lf.radius / constants.x_star
    u = x[..., 2] / r
    p2 = 0.5 * (3.0 * u**2 - 1.0)
    return mu_nd / r * (1.0 + lf.c20 * (R_nd / r) ** 2 * p2)


def potential_nd(theta: torch.Tensor, x: torch.Tensor, model: PinnModel) -> torch.Tensor:
    """
    Non-dimensional potential of one non-dimensional position ``(3,)``, as a function of the flat parameters.

    Pure and transform-safe: ``torch.func`` differentiates it in both ``theta`` and ``x``.
    """
    arch = model.params.architecture
    r = torch.linalg.vector_norm(x)
    U_nn = apply(arch, theta, feature_map(x, model.feature_kind))[0]
    U_hat_nn = unscale_proxy(U_nn, r) if model.proxy else U_nn

    U_lf = lf_potential_nd(x, model.fusion.lf_model, model.constants)
    if model.fusion.enabled:
        U_lf = transition(r, model.fusion.k_star, model.fusion.R_star) * U_lf
        core = U_hat_nn + U_lf
    else:
        core = U_hat_nn

    if not model.boundary.enabled:
        return core
    if arch.transition:
        k, r_ref = transition_scalars(theta[-2:])
    else:
        k, r_ref = model.boundary.k, model.boundary.r_ref
    w_bc = transition(r, k, r_ref)
    return (1.0 - w_bc) * core + w_bc * U_lf


def acceleration_nd(theta: torch.Tensor, x: torch.Tensor, model: PinnModel) -> torch.Tensor:
    """Non-dimensional ``+grad U`` at positions ``(N, 3)``, forward-mode in position."""
    return vmap(jacfwd(partial(potential_nd, model=model), argnums=1), in_dims=(None, 0))(theta, x)


def laplacian_nd(theta: torch.Tensor, x: torch.Tensor, model: PinnModel) -> torch.Tensor:
    """Non-dimensional Laplacian of the pipeline potential at positions ``(N, 3)``."""
    hessian = jacfwd(jacfwd(partial(potential_nd, model=model), argnums=1), argnums=1)
    return vmap(hessian, in_dims=(None, 0))(theta, x).diagonal(dim1=-2, dim2=-1).sum(dim=-1)


def _nondim(model: PinnModel, x: npt.ArrayLike) -> torch.Tensor:
    points = as_points(x)
    r = np.linalg.norm(points, axis=1)
    if np.any(r == 0.0):
        raise SingularityError("The pipeline is undefined at the origin")
    return torch.from_numpy(points / model.constants.x_star).to(DTYPE)


def _check_finite(values: torch.Tensor, what: str) -> None:
    if not torch.isfinite(values).all():
        sample = int(torch.nonzero(~torch.isfinite(values.reshape(len(values), -1)).all(dim=1))[0])
        raise NonFiniteError(f"Non-finite {what} at sample {sample}", sample=sample)


def pinn_potential(
    model: PinnModel,
    x: npt.ArrayLike,
    mode: Literal["inference", "training"] = "inference",
) -> FloatArray | torch.Tensor:
    """
    Dimensional potential ``U* * U_hat(x / x*)``.

    Both modes run the identical pipeline; ``training`` returns a tensor that tracks gradients through the flat
    parameters, ``inference`` returns a numpy array.
    """
    x_nd = _nondim(model, x)
    fn = vmap(partial(potential_nd, model=model), in_dims=(None, 0))
    if mode == "training":
        return model.constants.U_star * fn(model.params.flat, x_nd)
    out = torch.cat([fn(model.params.flat, chunk) for chunk in x_nd.split(EVAL_CHUNK)])
    _check_finite(out, "potential")
    return model.constants.U_star * out.detach().numpy()


def pinn_acceleration(model: PinnModel, x: npt.ArrayLike) -> FloatArray:
    """Dimensional acceleration ``a* * grad U_hat``, differentiated through the entire pipeline."""
    x_nd = _nondim(model, x)
    out = torch.cat([acceleration_nd(model.params.flat, chunk, model) for chunk in x_nd.split(EVAL_CHUNK)])
    _check_finite(out, "acceleration")
    return model.constants.a_star * out.detach().numpy()


def pinn_laplacian(model: PinnModel, x: npt.ArrayLike) -> FloatArray:
    """Dimensional Laplacian ``U* / x*^2 * lap U_hat``."""
    x_nd = _nondim(model, x)
    out = torch.cat([laplacian_nd(model.params.flat, chunk, model) for chunk in x_nd.split(EVAL_CHUNK)])
    return model.constants.U_star / model.constants.x_star**2 * out.detach().numpy()


def loss_rms(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean error magnitude ``mean |a_hat - a|``."""
    return rms_terms(predicted, target).mean()


def rms_terms(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(predicted - target, dim=-1)


def percent_terms(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample ``|a_hat - a| / |a|``; rejects zero-magnitude labels."""
    magnitude = torch.linalg.vector_norm(target, dim=-1)
    if bool((magnitude == 0.0).any()):
        raise ValueError("Percent loss is undefined for zero-magnitude acceleration labels")
    return rms_terms(predicted, target) / magnitude


def loss_rms_pct(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """``mean |a_hat - a| + mean |a_hat - a| / |a|``."""
    return loss_rms(predicted, target) + percent_terms(predicted, target).mean()


def loss_al(predicted: torch.Tensor, target: torch.Tensor, laplacian: torch.Tensor) -> torch.Tensor:
    """Percent loss plus the mean absolute Laplacian of the potential."""
    return loss_rms_pct(predicted, target) + laplacian.abs().mean()


def batch_loss(
    theta: torch.Tensor,
    model: PinnModel,
    x_nd: torch.Tensor,
    a_nd: torch.Tensor,
    kind: LossKind = LossKind.RMS_PCT,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Loss of one non-dimensional batch and the per-sample contributions.

    Returns:
        ``(loss, per_sample)``, the latter used to locate non-finite samples
    """
    predicted = acceleration_nd(theta, x_nd, model)
    per_sample = rms_terms(predicted, a_nd)
    if kind is LossKind.RMS:
        return per_sample.mean(), per_sample
    per_sample = per_sample + percent_terms(predicted, a_nd)
    if kind is LossKind.AL:
        per_sample = per_sample + laplacian_nd(theta, x_nd, model).abs()
    return per_sample.mean(), per_sample


def default_boundary(data: Dataset, body: BodyProperties, k: float = 2.0) -> BoundaryConfig:
    """``r_ref`` at the highest training radius (in body radii, at least 1), ``k = 2``."""
    r_max = float(np.max(np.linalg.norm(data.positions, axis=1))) / body.R
    return BoundaryConfig(enabled=True, r_ref=max(1.0, r_max), k=k)


def build_model(
    data: Dataset,
    body: BodyProperties,
    architecture: Architecture,
    lf_model: Optional[LowFidelityModel] = None,
    boundary: Optional[BoundaryConfig] = None,
    fusion: Optional[FusionConfig] = None,
    feature_kind: FeatureKind = "pines",
    proxy: bool = True,
) -> PinnModel:
    """
    Assemble an untrained model for a body and its training data.

    The network's input width follows ``feature_kind`` and its transition scalars start at the boundary config.
    ``U*`` is the maximum of the residual ``U - U_LF`` when fusion is enabled, of ``U`` otherwise.
    """
    if fusion is None:
        fusion = FusionConfig.from_body(body)
        if lf_model is not None:
            fusion = fusion.model_copy(update={"lf_model": lf_model})
    if boundary is None:
        boundary = default_boundary(data, body)
    constants = compute_constants(data, body, fusion.lf_model if fusion.enabled else None)
    params = init_params(
        depth=architecture.depth,
        width=architecture.width,
        feature_dim=FEATURE_DIMS[feature_kind],
        seed=architecture.seed,
        output_dim=1,
        transition=architecture.transition,
        transition_init=(boundary.k, boundary.r_ref),
    )
    logger.info(
        f"Built PINN: depth={architecture.depth}, width={architecture.width}, features={feature_kind}, "
        f"proxy={proxy}, boundary={boundary.enabled}, fusion={fusion.enabled}, params={params.architecture.param_count}"
    )
    return PinnModel(
        params=params,
        constants=constants,
        boundary=boundary,
        fusion=fusion,
        feature_kind=feature_kind,
        proxy=proxy,
    )


def nondim_batch(model: PinnModel, positions: FloatArray, accelerations: FloatArray) -> tuple[torch.Tensor, torch.Tensor]:
    """Positions and acceleration labels in the model's non-dimensional units."""
    x_nd = torch.from_numpy(np.asarray(positions) / model.constants.x_star).to(DTYPE)
    a_nd = torch.from_numpy(np.asarray(accelerations) / model.constants.a_star).to(DTYPE)
    return x_nd, a_nd

