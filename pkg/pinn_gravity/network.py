"""
Gated and plain multilayer perceptrons over a flat float64 parameter vector, with the derivatives the PINN losses need.

The parameters live in one flat tensor so ``torch.func`` can differentiate the loss with respect to all of them at
once. Input gradients are forward-mode (three tangents); the parameter gradient of a loss built on those input
gradients is reverse-over-forward.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import numpy.typing as npt
import torch
import torch.nn.functional as F
from torch.func import grad_and_value, jacfwd, jvp, vmap

from pinn_gravity._types import DTYPE
from pinn_gravity.errors import NonFiniteError
from pinn_gravity.models import Architecture

logger = logging.getLogger(__name__)

LossSpec = Callable[[torch.Tensor, Any], tuple[torch.Tensor, torch.Tensor]]

# Smallest decoded transition sharpness.
K_MIN = 1e-6


@dataclass(frozen=True, eq=False)
class MlpParams:
    """
    Network parameters as a single flat float64 vector.

    Attributes:
        architecture: Shape of the network
        flat: Parameter vector, ordered as ``architecture.layout()``
    """

    architecture: Architecture
    flat: torch.Tensor

    def __post_init__(self) -> None:
        if self.flat.shape != (self.architecture.param_count,):
            raise ValueError(f"Expected {self.architecture.param_count} parameters, got {tuple(self.flat.shape)}")

    def tensors(self) -> dict[str, torch.Tensor]:
        """Named views into the flat vector."""
        return unflatten(self.architecture, self.flat)

    def replace(self, flat: torch.Tensor) -> "MlpParams":
        return MlpParams(architecture=self.architecture, flat=flat.detach().clone())

    def __len__(self) -> int:
        return self.architecture.param_count


@dataclass(frozen=True)
class Batch:
    """Inputs and targets of one mini-batch, both indexed by sample along the first axis."""

    inputs: torch.Tensor
    targets: torch.Tensor

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class GradComputation:
    value: torch.Tensor
    input_gradient: torch.Tensor
    parameter_gradient: Optional[torch.Tensor] = None


def unflatten(architecture: Architecture, theta: torch.Tensor) -> dict[str, torch.Tensor]:
    """Slice ``theta`` into named tensors. Works under ``torch.func`` transforms."""
    tensors = {}
    offset = 0
    for name, shape in architecture.layout():
        size = math.prod(shape)
        tensors[name] = theta[offset : offset + size].reshape(shape)
        offset += size
    return tensors


def _inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def transition_scalars(raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Decode the stored transition pair into ``k = K_MIN + softplus(raw_k)`` and ``r_ref = 1 + softplus(raw_r)``.

    Any raw values give a positive sharpness and a reference radius at or outside the body.
    """
    return K_MIN + F.softplus(raw[..., 0]), 1.0 + F.softplus(raw[..., 1])


def transition_raw(k: float, r_ref: float) -> torch.Tensor:
    """Stored values that ``transition_scalars`` decodes to ``(k, r_ref)``."""
    k_free = max(k - K_MIN, K_MIN)
    r_free = max(r_ref - 1.0, K_MIN)
    return torch.tensor([_inverse_softplus(k_free), _inverse_softplus(r_free)], dtype=DTYPE)


def init_params(
    depth: int,
    width: int,
    feature_dim: int = 5,
    seed: int = 0,
    output_dim: int = 1,
    transition: bool = True,
    transition_init: tuple[float, float] = (2.0, 10.0),
    gated: bool = True,
) -> MlpParams:
    """
    Initialize a network deterministically from ``seed``.

    Weights are Glorot-normal and biases are zero. The transition scalars, when present, are stored unconstrained
    (see ``transition_scalars``) so that they decode to ``transition_init = (k, r_ref)``.
    """
    architecture = Architecture(
        depth=depth,
        width=width,
        feature_dim=feature_dim,
        output_dim=output_dim,
        transition=transition,
        gated=gated,
        seed=seed,
    )
    generator = torch.Generator().manual_seed(seed)
    chunks = []
    for name, shape in architecture.layout():
        if name == "transition":
            chunks.append(transition_raw(*transition_init))
        elif name.endswith(".weight"):
            fan_out, fan_in = shape
            std = math.sqrt(2.0 / (fan_in + fan_out))
            chunks.append(torch.randn(shape, generator=generator, dtype=DTYPE).reshape(-1) * std)
        else:
            chunks.append(torch.zeros(math.prod(shape), dtype=DTYPE))
    return MlpParams(architecture=architecture, flat=torch.cat(chunks))


def _raise_non_finite(h: torch.Tensor, layer: int) -> None:
    bad = ~torch.isfinite(h)
    sample = int(torch.nonzero(bad.reshape(len(h), -1).any(dim=1))[0]) if h.ndim > 1 else 0
    raise NonFiniteError(f"Non-finite activation in layer {layer}", layer=layer, sample=sample)


def apply(architecture: Architecture, theta: torch.Tensor, features: torch.Tensor, check: bool = False) -> torch.Tensor:
    """
    Run the network on ``features`` of shape ``(..., feature_dim)``.

    Both encoders see the raw features. Every hidden layer output ``z`` gates them in as ``z * U + (1 - z) * V``.
    An ungated architecture is a plain stack of tanh layers.
    ``check`` raises on non-finite intermediates and must stay off inside ``torch.func`` transforms.

    Returns:
        Outputs of shape ``(..., output_dim)``
    """
    p = unflatten(architecture, theta)
    if not architecture.gated:
        h = features
        for i in range(architecture.depth):
            h = torch.tanh(h @ p[f"hidden.{i}.weight"].T + p[f"hidden.{i}.bias"])
            if check and not torch.isfinite(h).all():
                _raise_non_finite(h, i)
        out = h @ p["output.weight"].T + p["output.bias"]
        if check and not torch.isfinite(out).all():
            _raise_non_finite(out, architecture.depth)
        return out
    u = F.gelu(features @ p["encoder_u.weight"].T + p["encoder_u.bias"])
    v = F.gelu(features @ p["encoder_v.weight"].T + p["encoder_v.bias"])
    z = F.gelu(features @ p["embedding.weight"].T + p["embedding.bias"])
    h = z * u + (1.0 - z) * v
    if check and not torch.isfinite(h).all():
        _raise_non_finite(h, 0)
    for i in range(architecture.depth - 1):
        z = F.gelu(h @ p[f"hidden.{i}.weight"].T + p[f"hidden.{i}.bias"])
        h = z * u + (1.0 - z) * v
        if check and not torch.isfinite(h).all():
            _raise_non_finite(h, i + 1)
    out = h @ p["output.weight"].T + p["output.bias"]
    if check and not torch.isfinite(out).all():
        _raise_non_finite(out, architecture.depth)
    return out


def forward(params: MlpParams, features: Union[torch.Tensor, npt.ArrayLike]) -> torch.Tensor:
    """
    Evaluate the network on one feature vector or a batch of them.

    Returns a scalar per input when ``output_dim`` is 1, otherwise the output vectors.

    Raises:
        NonFiniteError: If the input or any layer output is not finite
    """
    x = torch.as_tensor(features, dtype=DTYPE)
    if not torch.isfinite(x).all():
        raise NonFiniteError("Non-finite network input", layer=-1)
    out = apply(params.architecture, params.flat, x, check=True)
    return out[..., 0] if params.architecture.output_dim == 1 else out


def value_and_input_grad(
    params: MlpParams,
    features: torch.Tensor,
    jac_features_wrt_pos: torch.Tensor,
) -> GradComputation:
    """
    Network output and its gradient with respect to position.

    One forward-mode pass per column of the feature Jacobian gives ``d output / d position``.

    Args:
        params: Network parameters
        features: ``(F,)`` or ``(N, F)``
        jac_features_wrt_pos: ``(F, 3)`` or ``(N, F, 3)``

    Returns:
        ``value`` of shape ``()``/``(N,)`` and ``input_gradient`` of shape ``(3,)``/``(N, 3)``
    """
    value = forward(params, features)
    arch = params.architecture

    def scalar(feat: torch.Tensor) -> torch.Tensor:
        return apply(arch, params.flat, feat)[0]

    def directional(feat: torch.Tensor, tangent: torch.Tensor) -> torch.Tensor:
        return jvp(scalar, (feat,), (tangent,))[1]

    per_sample = vmap(directional, in_dims=(None, 1))
    if features.ndim == 1:
        gradient = per_sample(features, jac_features_wrt_pos)
    else:
        gradient = vmap(per_sample)(features, jac_features_wrt_pos)
    return GradComputation(value=value, input_gradient=gradient)


def loss_param_grad(params: MlpParams, batch: Any, loss_spec: LossSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Batch loss and its gradient with respect to every parameter.

    ``loss_spec(theta, batch)`` returns ``(loss, per_sample_loss)``; any input gradients it takes are forward-mode, so
    the result is reverse-over-forward.

    Raises:
        ValueError: If the batch is empty
        NonFiniteError: If the loss or the gradient is not finite
    """
    if len(batch) == 0:
        raise ValueError("Cannot differentiate an empty batch")
    gradient, (loss, per_sample) = grad_and_value(loss_spec, has_aux=True)(params.flat, batch)
    if not torch.isfinite(loss):
        bad = torch.nonzero(~torch.isfinite(per_sample.reshape(len(per_sample), -1).sum(dim=1)))
        sample = int(bad[0]) if len(bad) else None
        raise NonFiniteError(f"Non-finite loss at sample {sample}", sample=sample)
    if not torch.isfinite(gradient).all():
        raise NonFiniteError("Non-finite parameter gradient")
    return loss.detach(), gradient.detach()


def laplacian(
    params: MlpParams,
    potential: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    x: torch.Tensor,
) -> torch.Tensor:
    """
    Trace of the Hessian of ``potential(theta, x)`` with respect to ``x``, forward-over-forward.

    ``potential`` is the full scalar pipeline for one point; ``x`` is ``(3,)`` or ``(N, 3)``.
    """
    hessian = jacfwd(jacfwd(potential, argnums=1), argnums=1)
    if x.ndim == 1:
        return torch.trace(hessian(params.flat, x))
    return vmap(hessian, in_dims=(None, 0))(params.flat, x).diagonal(dim1=-2, dim2=-1).sum(dim=-1)


def save_params(params: MlpParams, directory: Union[str, Path]) -> None:
    """Write ``params.npy`` (flat float64) and its ``architecture.json`` header."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    np.save(directory / "params.npy", params.flat.detach().cpu().numpy().astype(np.float64))
    (directory / "architecture.json").write_text(params.architecture.model_dump_json(indent=2))


def load_params(directory: Union[str, Path]) -> MlpParams:
    directory = Path(directory)
    architecture = Architecture.model_validate_json((directory / "architecture.json").read_text())
    flat = torch.from_numpy(np.load(directory / "params.npy")).to(DTYPE)
    return MlpParams(architecture=architecture, flat=flat)
