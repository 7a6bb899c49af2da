from dataclasses import dataclass, field
from typing import Optional, Protocol, TypeAlias, runtime_checkable

import numpy as np
import numpy.typing as npt
import torch

from pinn_gravity.models import DatasetMeta

FloatArray: TypeAlias = npt.NDArray[np.float64]
IntArray: TypeAlias = npt.NDArray[np.int64]

DTYPE = torch.float64


@dataclass(frozen=True)
class GravityEval:
    """Potential and acceleration of a gravity model at a set of field points.

    Attributes:
        potential: Potential per point, shape ``(N,)``, positive convention ``U = mu / r``.
            ``None`` for models that only regress accelerations.
        acceleration: Acceleration per point, shape ``(N, 3)``, equal to ``+grad U``.
    """

    potential: Optional[FloatArray]
    acceleration: FloatArray

    def __add__(self, other: "GravityEval") -> "GravityEval":
        if self.potential is None or other.potential is None:
            potential = None
        else:
            potential = self.potential + other.potential
        return GravityEval(potential=potential, acceleration=self.acceleration + other.acceleration)

    def __len__(self) -> int:
        return len(self.acceleration)


@runtime_checkable
class GravityModel(Protocol):
    """Anything that can be evaluated at field points."""

    @property
    def param_count(self) -> int: ...

    def evaluate(self, points: FloatArray) -> GravityEval: ...


def as_points(points: npt.ArrayLike) -> FloatArray:
    """Coerce a single 3-vector or an ``(N, 3)`` array to a float64 ``(N, 3)`` array."""
    array = np.asarray(points, dtype=np.float64)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2 or array.shape[1] != 3:
        raise ValueError(f"Expected points of shape (N, 3), got {array.shape}")
    return array


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Field samples with provenance.

    Attributes:
        positions: Sample positions ``(N, 3)``
        accelerations: Acceleration labels ``(N, 3)``
        potentials: Potential labels ``(N,)``, absent for acceleration-only data
        interior: Per-sample flag for points inside the body, if known
        meta: Altitude band, noise level, seed and truth identifier
    """

    positions: FloatArray
    accelerations: FloatArray
    potentials: Optional[FloatArray] = None
    interior: Optional[npt.NDArray[np.bool_]] = None
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self) -> None:
        n = len(self.positions)
        if self.positions.shape != (n, 3) or self.accelerations.shape != (n, 3):
            raise ValueError("positions and accelerations must both be (N, 3)")
        if self.potentials is not None and self.potentials.shape != (n,):
            raise ValueError("potentials must be (N,)")
        if self.interior is not None and self.interior.shape != (n,):
            raise ValueError("interior must be (N,)")

    def subset(self, index: npt.ArrayLike) -> "Dataset":
        return Dataset(
            positions=self.positions[index],
            accelerations=self.accelerations[index],
            potentials=None if self.potentials is None else self.potentials[index],
            interior=None if self.interior is None else self.interior[index],
            meta=self.meta,
        )

    def __len__(self) -> int:
        return len(self.positions)
