"""
Classical gravity models: point mass, spherical harmonics, polyhedron and mascons, plus the heterogeneous truth field.

All models use the positive potential convention ``U = mu / r`` and return accelerations ``a = +grad U``.
"""

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import numpy.typing as npt
from scipy.special import gammaln

from pinn_gravity._types import FloatArray, GravityEval, as_points
from pinn_gravity.errors import OnSurfaceError, SingularityError
from pinn_gravity.geometry import _CHUNK_ELEMENTS, ON_SURFACE_TOL, ShapeModel, _on_surface_facet, solid_angles
from pinn_gravity.models import AnomalySpec, LowFidelityModel

logger = logging.getLogger(__name__)

GRAVITY_CONSTANT = 6.67430e-11

CoefficientKind = Literal["C", "S"]


def pm_eval(mu: float, x: npt.ArrayLike, position: Optional[npt.ArrayLike] = None) -> GravityEval:
    """
    Point-mass potential and acceleration.

    Args:
        mu: Gravitational parameter
        x: Field point or points ``(N, 3)``
        position: Location of the point mass, origin by default

    Raises:
        SingularityError: If a field point coincides with the point mass
    """
    points = as_points(x)
    rel = points if position is None else points - np.asarray(position, dtype=np.float64)
    r = np.linalg.norm(rel, axis=1)
    if np.any(r == 0.0):
        raise SingularityError(f"Field point {int(np.argmin(r))} coincides with a point mass")
    return GravityEval(potential=mu / r, acceleration=-mu * rel / r[:, None] ** 3)


@dataclass(frozen=True)
class PointMassModel:
    mu: float

    @property
    def param_count(self) -> int:
        return 1

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return pm_eval(self.mu, points)


# ---------------------------------------------------------------------------
# Spherical harmonics
# ---------------------------------------------------------------------------


def sh_index(l_max: int) -> list[tuple[CoefficientKind, int, int]]:
    """
    Order of the Stokes coefficients in flat vectors and basis columns.

    Degree by degree: ``C_n0, C_n1, S_n1, ..., C_nn, S_nn``. ``S_n0`` is identically zero and omitted, so there are
    ``(l_max + 1)**2`` entries.
    """
    index: list[tuple[CoefficientKind, int, int]] = []
    for n in range(l_max + 1):
        index.append(("C", n, 0))
        for m in range(1, n + 1):
            index.append(("C", n, m))
            index.append(("S", n, m))
    return index


def normalization(n: int, m: int) -> float:
    """Full normalization ``N_lm`` with ``C_unnormalized = N_lm * C_normalized``."""
    delta = 1.0 if m == 0 else 0.0
    return math.exp(0.5 * (math.log((2.0 - delta) * (2 * n + 1)) + gammaln(n - m + 1) - gammaln(n + m + 1)))


def _legendre(u: FloatArray, l_max: int) -> FloatArray:
    """
    Fully normalized derived Legendre functions ``A[:, n, m]`` for ``n <= l_max``, ``m <= n + 1``.

    ``A[:, n, n + 1]`` is zero. Column-wise recursion, stable through high degree.
    """
    A = np.zeros((len(u), l_max + 1, l_max + 2))
    A[:, 0, 0] = 1.0
    if l_max >= 1:
        A[:, 1, 1] = math.sqrt(3.0)
    for n in range(2, l_max + 1):
        A[:, n, n] = math.sqrt((2 * n + 1) / (2 * n)) * A[:, n - 1, n - 1]
    for n in range(1, l_max + 1):
        m = np.arange(n)
        a = np.sqrt((2 * n + 1) * (2 * n - 1) / ((n - m) * (n + m)))
        A[:, n, :n] = u[:, None] * A[:, n - 1, :n] * a
        if n >= 2:
            b = np.sqrt((2 * n + 1) * (n + m - 1) * (n - m - 1) / ((2 * n - 3) * (n + m) * (n - m)))
            A[:, n, :n] -= A[:, n - 2, :n] * b
    return A


def _sh_chunk(points: FloatArray, mu: float, R: float, l_max: int) -> tuple[FloatArray, FloatArray]:
    r = np.linalg.norm(points, axis=1)
    if np.any(r == 0.0):
        raise SingularityError("Spherical harmonics are singular at the origin")
    r_hat = points / r[:, None]
    s, t, u = r_hat.T
    A = _legendre(u, l_max)

    # Real and imaginary parts of (s + i t)^m, with a zero column prepended for the m - 1 shift.
    re = np.zeros((len(r), l_max + 2))
    im = np.zeros((len(r), l_max + 2))
    re[:, 1] = 1.0
    for m in range(1, l_max + 1):
        re[:, m + 1] = s * re[:, m] - t * im[:, m]
        im[:, m + 1] = s * im[:, m] + t * re[:, m]

    n_coeff = (l_max + 1) ** 2
    pot = np.empty((len(r), n_coeff))
    acc = np.empty((len(r), 3, n_coeff))
    for n in range(l_max + 1):
        rho = (mu / r) * (R / r) ** n
        m = np.arange(n + 1)
        k = np.where(m == 0, 0.5, 1.0)
        A_n = A[:, n, : n + 1]
        dA_n = np.sqrt(k * (n - m) * (n + m + 1)) * A[:, n, 1 : n + 2]
        re_m, im_m = re[:, 1 : n + 2], im[:, 1 : n + 2]
        re_prev, im_prev = re[:, : n + 1], im[:, : n + 1]

        pot_c = rho[:, None] * A_n * re_m
        pot_s = rho[:, None] * A_n * im_m
        g_c = rho[:, None, None] * np.stack([A_n * m * re_prev, -A_n * m * im_prev, dA_n * re_m], axis=1)
        g_s = rho[:, None, None] * np.stack([A_n * m * im_prev, A_n * m * re_prev, dA_n * im_m], axis=1)

        def accel(p: FloatArray, g: FloatArray) -> FloatArray:
            radial = -(n + 1) / r[:, None] * p
            g_radial = np.einsum("ni,nim->nm", r_hat, g)
            return r_hat[:, :, None] * (radial - g_radial / r[:, None])[:, None, :] + g / r[:, None, None]

        a_c = accel(pot_c, g_c)
        a_s = accel(pot_s, g_s)

        start = n * n
        pot[:, start] = pot_c[:, 0]
        acc[:, :, start] = a_c[:, :, 0]
        if n > 0:
            pot[:, start + 1 : start + 2 * n + 1 : 2] = pot_c[:, 1:]
            pot[:, start + 2 : start + 2 * n + 1 : 2] = pot_s[:, 1:]
            acc[:, :, start + 1 : start + 2 * n + 1 : 2] = a_c[:, :, 1:]
            acc[:, :, start + 2 : start + 2 * n + 1 : 2] = a_s[:, :, 1:]
    return pot, acc


def sh_basis(points: npt.ArrayLike, mu: float, R: float, l_max: int) -> tuple[FloatArray, FloatArray]:
    """
    Potential and acceleration contributed by each unit fully normalized Stokes coefficient.

    Args:
        points: Field points ``(N, 3)``
        mu: Gravitational parameter
        R: Reference radius
        l_max: Maximum degree

    Returns:
        ``(potential, acceleration)`` of shapes ``(N, K)`` and ``(N, 3, K)`` with ``K = (l_max + 1)**2``, columns
        ordered as ``sh_index``.
    """
    pts = as_points(points)
    return _sh_chunk(pts, mu, R, l_max)


@dataclass(frozen=True, eq=False)
class SphericalHarmonicModel:
    """
    Exterior spherical harmonic expansion with fully normalized coefficients.

    Attributes:
        mu: Gravitational parameter
        R: Reference radius
        l_max: Maximum degree
        C: Cosine coefficients ``C[l, m]``
        S: Sine coefficients ``S[l, m]``; the ``m = 0`` column must be zero
        warn_inside: Log a warning when evaluated inside the reference sphere
    """

    mu: float
    R: float
    l_max: int
    C: FloatArray
    S: FloatArray
    warn_inside: bool = field(default=True, compare=False)

    def __post_init__(self) -> None:
        shape = (self.l_max + 1, self.l_max + 1)
        if self.C.shape != shape or self.S.shape != shape:
            raise ValueError(f"Coefficient tables must have shape {shape}")
        if np.any(self.S[:, 0] != 0.0):
            raise ValueError("S[l, 0] must be zero for every degree")

    @classmethod
    def from_vector(cls, mu: float, R: float, l_max: int, coefficients: npt.ArrayLike) -> "SphericalHarmonicModel":
        """Build from a flat vector ordered as ``sh_index``."""
        vec = np.asarray(coefficients, dtype=np.float64)
        C = np.zeros((l_max + 1, l_max + 1))
        S = np.zeros((l_max + 1, l_max + 1))
        for value, (kind, n, m) in zip(vec, sh_index(l_max), strict=True):
            (C if kind == "C" else S)[n, m] = value
        return cls(mu=mu, R=R, l_max=l_max, C=C, S=S)

    @classmethod
    def point_mass(cls, mu: float, R: float, l_max: int = 0) -> "SphericalHarmonicModel":
        C = np.zeros((l_max + 1, l_max + 1))
        C[0, 0] = 1.0
        return cls(mu=mu, R=R, l_max=l_max, C=C, S=np.zeros_like(C))

    @cached_property
    def vector(self) -> FloatArray:
        return np.array([(self.C if kind == "C" else self.S)[n, m] for kind, n, m in sh_index(self.l_max)])

    @property
    def param_count(self) -> int:
        return (self.l_max + 1) ** 2

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return sh_eval(self, points)


def sh_eval(model: SphericalHarmonicModel, x: npt.ArrayLike) -> GravityEval:
    """
    Evaluate a spherical harmonic model analytically.

    Logs a warning for field points inside the reference sphere, where the series may diverge.
    """
    points = as_points(x)
    r = np.linalg.norm(points, axis=1)
    inside = int(np.sum(r < model.R))
    if inside and model.warn_inside:
        logger.warning(f"{inside} field points lie inside the Brillouin sphere R={model.R:.6g}; the series may diverge")
    vec = model.vector
    potential = np.empty(len(points))
    acceleration = np.empty((len(points), 3))
    step = max(1, _CHUNK_ELEMENTS // (3 * len(vec)))
    for start in range(0, len(points), step):
        pot, acc = _sh_chunk(points[start : start + step], model.mu, model.R, model.l_max)
        potential[start : start + step] = pot @ vec
        acceleration[start : start + step] = acc @ vec
    return GravityEval(potential=potential, acceleration=acceleration)


def low_fidelity_sh(lf: LowFidelityModel) -> SphericalHarmonicModel:
    """Point mass plus the a-priori C20 term as a degree-2 expansion; no interior warnings."""
    C = np.zeros((3, 3))
    C[0, 0] = 1.0
    C[2, 0] = lf.c20 / normalization(2, 0)
    return SphericalHarmonicModel(mu=lf.mu, R=lf.radius, l_max=2, C=C, S=np.zeros_like(C), warn_inside=False)


def write_sh_coefficients(model: SphericalHarmonicModel, path: Union[str, Path], normalized: bool = False) -> None:
    """
    Write ``mu R l_max`` followed by one ``l m C S`` record per coefficient pair.

    Coefficients are converted to unnormalized form unless ``normalized`` is set, in which case the header carries a
    fourth token ``normalized``. Unnormalized values underflow for degrees beyond about 150.
    """
    header = f"{model.mu:.17g} {model.R:.17g} {model.l_max}"
    if normalized:
        header += " normalized"
    lines = [header]
    for n in range(model.l_max + 1):
        for m in range(n + 1):
            scale = 1.0 if normalized else normalization(n, m)
            lines.append(f"{n} {m} {model.C[n, m] * scale:.17g} {model.S[n, m] * scale:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_sh_coefficients(path: Union[str, Path]) -> SphericalHarmonicModel:
    return parse_sh_coefficients(Path(path).read_text().splitlines())


def parse_sh_coefficients(lines: Iterable[str]) -> SphericalHarmonicModel:
    """Parse the coefficient text format; missing ``(l, m)`` records are zero."""
    records = [line.split() for line in lines if line.strip()]
    if not records:
        raise ValueError("Empty coefficient file")
    header = records[0]
    mu, R, l_max = float(header[0]), float(header[1]), int(header[2])
    normalized = len(header) > 3 and header[3] == "normalized"
    C = np.zeros((l_max + 1, l_max + 1))
    S = np.zeros((l_max + 1, l_max + 1))
    for record in records[1:]:
        n, m = int(record[0]), int(record[1])
        if not 0 <= m <= n <= l_max:
            raise ValueError(f"Coefficient record ({n}, {m}) outside degree {l_max}")
        scale = 1.0 if normalized else normalization(n, m)
        C[n, m] = float(record[2]) / scale
        S[n, m] = float(record[3]) / scale if m > 0 else 0.0
    return SphericalHarmonicModel(mu=mu, R=R, l_max=l_max, C=C, S=S)


# ---------------------------------------------------------------------------
# Polyhedron
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PolyhedralModel:
    """
    Constant-density polyhedron evaluated with edge and facet dyads.

    Attributes:
        shape: Closed outward-oriented shape model
        g_sigma: Gravitational constant times density, pre-multiplied
    """

    shape: ShapeModel
    g_sigma: float

    def __post_init__(self) -> None:
        if self.g_sigma <= 0:
            raise ValueError(f"G * sigma must be positive, got {self.g_sigma}")

    @classmethod
    def from_density(cls, shape: ShapeModel, density: float, G: float = GRAVITY_CONSTANT) -> "PolyhedralModel":
        return cls(shape=shape, g_sigma=G * density)

    @classmethod
    def from_mu(cls, shape: ShapeModel, mu: float, volume: Optional[float] = None) -> "PolyhedralModel":
        """Uniform density giving a total gravitational parameter ``mu`` over ``volume`` (the shape volume by default)."""
        return cls(shape=shape, g_sigma=mu / (volume if volume is not None else shape.volume))

    @property
    def mu(self) -> float:
        return self.g_sigma * self.shape.volume

    @property
    def param_count(self) -> int:
        return 3 * (len(self.shape.vertices) + len(self.shape.facets))

    @cached_property
    def _edge_terms(self) -> tuple[FloatArray, ...]:
        verts = self.shape.vertices
        edge_vertices, edge_facets = self.shape.edges
        p = verts[edge_vertices[:, 0]]
        q = verts[edge_vertices[:, 1]]
        normals = self.shape.facet_normals
        n_a = normals[edge_facets[:, 0]]
        n_b = normals[edge_facets[:, 1]]
        # Edge normals lie in the facet plane and point out of the facet; facet A runs p -> q, facet B q -> p.
        ne_a = np.cross(q - p, n_a)
        ne_a /= np.linalg.norm(ne_a, axis=1, keepdims=True)
        ne_b = np.cross(p - q, n_b)
        ne_b /= np.linalg.norm(ne_b, axis=1, keepdims=True)
        return p, q, n_a, ne_a, n_b, ne_b

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return poly_eval(self, points)

    def laplacian(self, points: npt.ArrayLike) -> FloatArray:
        """``-G sigma * sum of facet solid angles``: zero outside, ``-4 pi G sigma`` inside."""
        pts = as_points(points)
        self._check_surface(pts)
        return -self.g_sigma * solid_angles(self.shape, pts).sum(axis=1)

    def _check_surface(self, points: FloatArray) -> None:
        p, q, *_ = self._edge_terms
        length = np.linalg.norm(q - p, axis=1)
        tol = ON_SURFACE_TOL * self.shape.radius
        step = max(1, _CHUNK_ELEMENTS // len(p))
        for start in range(0, len(points), step):
            chunk = points[start : start + step]
            r1 = np.linalg.norm(p[None] - chunk[:, None], axis=2)
            r2 = np.linalg.norm(q[None] - chunk[:, None], axis=2)
            slack = r1 + r2 - length[None]
            if np.any(slack <= tol):
                n, e = np.argwhere(slack <= tol)[0]
                raise OnSurfaceError(f"Point {start + n} lies on edge {e}", edge=int(e))
        hit = _on_surface_facet(self.shape, points)
        if hit is not None:
            n, f = hit
            raise OnSurfaceError(f"Point {n} lies on facet {f}", facet=f)


def poly_eval(model: PolyhedralModel, x: npt.ArrayLike) -> GravityEval:
    """
    Potential and acceleration of a constant-density polyhedron.

    Raises:
        OnSurfaceError: If a field point lies on an edge or facet of the shape
    """
    points = as_points(x)
    model._check_surface(points)
    p, q, n_a, ne_a, n_b, ne_b = model._edge_terms
    length = np.linalg.norm(q - p, axis=1)
    tri = model.shape.triangles
    normals = model.shape.facet_normals

    potential = np.empty(len(points))
    acceleration = np.empty((len(points), 3))
    step = max(1, _CHUNK_ELEMENTS // max(len(p), len(tri)))
    for start in range(0, len(points), step):
        chunk = points[start : start + step]
        # Edge terms: r_e from the field point to the edge start.
        r_e = p[None] - chunk[:, None]
        r1 = np.linalg.norm(r_e, axis=2)
        r2 = np.linalg.norm(q[None] - chunk[:, None], axis=2)
        L_e = np.log((r1 + r2 + length) / (r1 + r2 - length))
        a_dot = np.einsum("nei,ei->ne", r_e, n_a)
        ae_dot = np.einsum("nei,ei->ne", r_e, ne_a)
        b_dot = np.einsum("nei,ei->ne", r_e, n_b)
        be_dot = np.einsum("nei,ei->ne", r_e, ne_b)
        E_r = n_a[None] * ae_dot[..., None] + n_b[None] * be_dot[..., None]
        edge_pot = np.sum((a_dot * ae_dot + b_dot * be_dot) * L_e, axis=1)
        edge_acc = np.einsum("nei,ne->ni", E_r, L_e)

        # Facet terms: r_f from the field point to the first facet vertex.
        r_f = tri[None, :, 0] - chunk[:, None]
        omega = solid_angles(model.shape, chunk)
        f_dot = np.einsum("nfi,fi->nf", r_f, normals)
        facet_pot = np.sum(f_dot * f_dot * omega, axis=1)
        facet_acc = np.einsum("fi,nf->ni", normals, f_dot * omega)

        potential[start : start + step] = 0.5 * model.g_sigma * (edge_pot - facet_pot)
        acceleration[start : start + step] = -model.g_sigma * (edge_acc - facet_acc)
    return GravityEval(potential=potential, acceleration=acceleration)


# ---------------------------------------------------------------------------
# Mascons and the heterogeneous truth field
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MasconModel:
    """
    Superposition of point masses.

    Attributes:
        positions: Mascon positions ``(M, 3)``
        mus: Gravitational parameters ``(M,)``, possibly negative
        seed: Seed the positions were drawn with, if any
    """

    positions: FloatArray
    mus: FloatArray
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) != len(self.mus):
            raise ValueError("positions must be (M, 3) and match mus")

    @property
    def total_mu(self) -> float:
        return float(np.sum(self.mus))

    @property
    def param_count(self) -> int:
        return 4 * len(self.mus)

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return mascon_eval(self, points)


def mascon_basis(points: FloatArray, positions: FloatArray) -> tuple[FloatArray, FloatArray]:
    """
    Potential ``(N, M)`` and acceleration ``(N, 3, M)`` of unit-mu point masses at ``positions``.

    Raises:
        SingularityError: If a field point coincides with a mascon
    """
    rel = points[:, None, :] - positions[None, :, :]
    r = np.linalg.norm(rel, axis=2)
    if np.any(r == 0.0):
        n, m = np.argwhere(r == 0.0)[0]
        raise SingularityError(f"Field point {n} coincides with mascon {m}")
    return 1.0 / r, np.transpose(-rel / r[..., None] ** 3, (0, 2, 1))


def mascon_eval(model: MasconModel, x: npt.ArrayLike) -> GravityEval:
    points = as_points(x)
    potential = np.empty(len(points))
    acceleration = np.empty((len(points), 3))
    step = max(1, _CHUNK_ELEMENTS // (3 * len(model.mus)))
    for start in range(0, len(points), step):
        pot, acc = mascon_basis(points[start : start + step], model.positions)
        potential[start : start + step] = pot @ model.mus
        acceleration[start : start + step] = acc @ model.mus
    return GravityEval(potential=potential, acceleration=acceleration)


@dataclass(frozen=True, eq=False)
class HeterogeneousTruthModel:
    """Constant-density polyhedron plus point-mass anomalies ``(position, mu)``."""

    base: PolyhedralModel
    anomalies: Sequence[tuple[FloatArray, float]] = ()

    @property
    def mu(self) -> float:
        return self.base.mu + sum(mu for _, mu in self.anomalies)

    @property
    def param_count(self) -> int:
        return self.base.param_count + 4 * len(self.anomalies)

    def evaluate(self, points: npt.ArrayLike) -> GravityEval:
        return hetero_eval(self, points)


def hetero_eval(model: HeterogeneousTruthModel, x: npt.ArrayLike) -> GravityEval:
    result = poly_eval(model.base, x)
    for position, mu in model.anomalies:
        result = result + pm_eval(mu, x, position=position)
    return result


def heterogeneous_truth(
    shape: ShapeModel,
    mu: float,
    fraction: float = 0.1,
    offset: float = 0.5,
) -> HeterogeneousTruthModel:
    """
    Polyhedron with a mass element added at ``(+offset R, 0, 0)`` and removed at ``(-offset R, 0, 0)``.

    Each element carries ``fraction * mu``; the pair sums to zero so the total ``mu`` is preserved.
    """
    return truth_from_anomalies(
        shape,
        mu,
        [
            AnomalySpec(position=(offset, 0.0, 0.0), mu_fraction=fraction),
            AnomalySpec(position=(-offset, 0.0, 0.0), mu_fraction=-fraction),
        ],
    )


def truth_from_anomalies(shape: ShapeModel, mu: float, anomalies: Sequence[AnomalySpec]) -> HeterogeneousTruthModel:
    """Scale the polyhedron so base plus anomalies carry exactly ``mu``. Anomaly positions are in body radii."""
    R = shape.radius
    elements = [(np.asarray(a.position, dtype=np.float64) * R, a.mu_fraction * mu) for a in anomalies]
    base_mu = mu - sum(m for _, m in elements)
    if base_mu <= 0:
        raise ValueError(f"Anomalies leave a non-positive base mu ({base_mu:.6g})")
    return HeterogeneousTruthModel(base=PolyhedralModel.from_mu(shape, base_mu), anomalies=tuple(elements))
