"""Shape models, geometric queries and spatial sampling."""

import logging
import math
from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Union

import numpy as np
import numpy.typing as npt

from pinn_gravity._types import FloatArray, IntArray, as_points
from pinn_gravity.errors import MeshError, OnSurfaceError
from pinn_gravity.models import BodyProperties

logger = logging.getLogger(__name__)

SOLID_ANGLE_TOL = 1e-6
ON_SURFACE_TOL = 1e-12
# Upper bound on points x facets handled per vectorised chunk.
_CHUNK_ELEMENTS = 2_000_000

EROS_SEMI_AXES = (16_000.0, 6_000.0, 5_500.0)
EROS_MU = 4.4631e5

_PHI = (1.0 + math.sqrt(5.0)) / 2.0
_ICOSAHEDRON_VERTICES = np.array(
    [
        [-1.0, _PHI, 0.0],
        [1.0, _PHI, 0.0],
        [-1.0, -_PHI, 0.0],
        [1.0, -_PHI, 0.0],
        [0.0, -1.0, _PHI],
        [0.0, 1.0, _PHI],
        [0.0, -1.0, -_PHI],
        [0.0, 1.0, -_PHI],
        [_PHI, 0.0, -1.0],
        [_PHI, 0.0, 1.0],
        [-_PHI, 0.0, -1.0],
        [-_PHI, 0.0, 1.0],
    ]
)
_ICOSAHEDRON_FACETS = np.array(
    [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [5, 4, 9],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ]
)
_CUBE_FACETS = np.array(
    [
        [0, 1, 3],
        [0, 3, 2],
        [4, 7, 5],
        [4, 6, 7],
        [0, 4, 5],
        [0, 5, 1],
        [2, 3, 7],
        [2, 7, 6],
        [0, 2, 6],
        [0, 6, 4],
        [1, 5, 7],
        [1, 7, 3],
    ]
)


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """
    Closed, outward-oriented triangulated surface.

    Construct through ``from_arrays`` or ``load_shape``; both validate the mesh.

    Attributes:
        vertices: Vertex positions, shape ``(V, 3)``
        facets: Vertex indices per facet, shape ``(F, 3)``, counter-clockwise seen from outside
    """

    vertices: FloatArray
    facets: IntArray

    @classmethod
    def from_arrays(
        cls,
        vertices: npt.ArrayLike,
        facets: npt.ArrayLike,
        recenter: bool = True,
    ) -> "ShapeModel":
        """
        Validate a mesh and optionally move it to its constant-density principal frame.

        Args:
            vertices: Vertex positions ``(V, 3)``
            facets: Triangles as vertex-index triples ``(F, 3)``
            recenter: Move the origin to the centre of mass and rotate onto the principal axes

        Returns:
            The validated shape model

        Raises:
            MeshError: If the mesh is not a closed, consistently wound 2-manifold of positive volume
        """
        verts = np.asarray(vertices, dtype=np.float64)
        tris = np.asarray(facets)
        if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) == 0:
            raise MeshError(f"Vertices must have shape (V, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3 or len(tris) == 0:
            raise MeshError(f"Facets must be vertex-index triples, got shape {tris.shape}")
        if not np.issubdtype(tris.dtype, np.integer):
            raise MeshError("Facet indices must be integers")
        if not np.all(np.isfinite(verts)):
            raise MeshError("Vertices contain non-finite coordinates")
        tris = tris.astype(np.int64)

        _validate_topology(tris, len(verts))
        shape = cls(vertices=verts, facets=tris)
        if shape.volume <= 0.0:
            raise MeshError(f"Signed volume {shape.volume:.6g} is not positive; facets are wound inward")
        if recenter:
            shape = shape._to_principal_frame()
        return shape

    def _to_principal_frame(self) -> "ShapeModel":
        verts = self.vertices
        com = self.center_of_mass
        scale = float(np.max(np.linalg.norm(verts, axis=1)))
        if np.linalg.norm(com) > ON_SURFACE_TOL * scale:
            verts = verts - com
        shifted = ShapeModel(vertices=verts, facets=self.facets)

        inertia = shifted.inertia
        diag = np.diag(inertia)
        off_diag = inertia - np.diag(diag)
        size = float(np.max(np.abs(diag)))
        rotated = np.max(np.abs(off_diag)) > 1e-9 * size
        unsorted = np.any(np.diff(diag) < -1e-9 * size)
        if rotated or unsorted:
            # eigh sorts ascending: the smallest moment of inertia (long axis) maps to x.
            _, axes = np.linalg.eigh(inertia)
            if np.linalg.det(axes) < 0:
                axes[:, 2] = -axes[:, 2]
            verts = verts @ axes
            logger.debug(f"Rotated shape into its principal frame, off-diagonal inertia {np.max(np.abs(off_diag)):.3g}")
        return ShapeModel(vertices=np.ascontiguousarray(verts), facets=self.facets)

    @property
    def triangles(self) -> FloatArray:
        """Vertex positions per facet, shape ``(F, 3, 3)``."""
        return self.vertices[self.facets]

    @cached_property
    def _tetra_dets(self) -> FloatArray:
        tri = self.triangles
        return np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2]))

    @cached_property
    def volume(self) -> float:
        """Signed volume as the sum of origin-apex tetrahedra."""
        return float(np.sum(self._tetra_dets) / 6.0)

    @cached_property
    def center_of_mass(self) -> FloatArray:
        """Centre of mass of the constant-density solid."""
        tri_sum = self.triangles.sum(axis=1)
        return (self._tetra_dets[:, None] * tri_sum).sum(axis=0) / 24.0 / self.volume

    @cached_property
    def inertia(self) -> FloatArray:
        """Unit-density inertia tensor about the centre of mass."""
        tri = self.triangles
        tri_sum = tri.sum(axis=1)
        outer = np.einsum("fki,fkj->fij", tri, tri) + np.einsum("fi,fj->fij", tri_sum, tri_sum)
        second = np.einsum("f,fij->ij", self._tetra_dets, outer) / 120.0
        com = self.center_of_mass
        second = second - self.volume * np.outer(com, com)
        return np.trace(second) * np.eye(3) - second

    @cached_property
    def facet_normals(self) -> FloatArray:
        """Unit outward facet normals ``(F, 3)``; zero for degenerate facets."""
        tri = self.triangles
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        return np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)

    @cached_property
    def facet_areas(self) -> FloatArray:
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @cached_property
    def edges(self) -> tuple[IntArray, IntArray]:
        """
        Unique edges with their two adjacent facets.

        Returns:
            ``(edge_vertices, edge_facets)``, both ``(E, 2)``. Facet ``edge_facets[e, 0]`` traverses the edge as
            ``edge_vertices[e, 0] -> edge_vertices[e, 1]``; facet ``edge_facets[e, 1]`` traverses it reversed.
        """
        owner: dict[tuple[int, int], int] = {}
        for f, (a, b, c) in enumerate(self.facets.tolist()):
            owner[(a, b)] = f
            owner[(b, c)] = f
            owner[(c, a)] = f
        pairs = []
        adjacent = []
        for (p, q), f in owner.items():
            if p < q:
                pairs.append((p, q))
                adjacent.append((f, owner[(q, p)]))
        return np.asarray(pairs, dtype=np.int64), np.asarray(adjacent, dtype=np.int64)

    @property
    def radius(self) -> float:
        """Circumscribing radius about the origin."""
        return float(np.max(np.linalg.norm(self.vertices, axis=1)))

    def __len__(self) -> int:
        return len(self.facets)


def _validate_topology(facets: IntArray, n_vertices: int) -> None:
    if facets.min() < 0 or facets.max() >= n_vertices:
        bad = int(facets.max()) if facets.max() >= n_vertices else int(facets.min())
        raise MeshError(f"Facet index {bad} out of range for {n_vertices} vertices")
    unreferenced = set(range(n_vertices)) - set(np.unique(facets).tolist())
    if unreferenced:
        raise MeshError(f"Unreferenced vertex {min(unreferenced)} ({len(unreferenced)} in total)")

    directed: Counter[tuple[int, int]] = Counter()
    for f, (a, b, c) in enumerate(facets.tolist()):
        if a == b or b == c or c == a:
            raise MeshError(f"Facet {f} repeats a vertex: {(a, b, c)}")
        directed.update(((a, b), (b, c), (c, a)))

    for (p, q), count in directed.items():
        if count > 1:
            raise MeshError(f"Edge {(p, q)} is traversed {count} times in the same direction: non-manifold or inconsistent winding")
        if (q, p) not in directed:
            raise MeshError(f"Open edge {(p, q)}: shared by one facet only")


def load_shape(obj_text: Union[str, Iterable[str]], recenter: bool = True) -> ShapeModel:
    """
    Parse a Wavefront mesh made of ``v`` and triangular ``f`` records.

    Indices are 1-based; ``f`` tokens of the form ``i/j/k`` use the vertex index. Every other record type is ignored.

    Raises:
        MeshError: On malformed records, non-triangular facets or an invalid mesh
    """
    lines = obj_text.splitlines() if isinstance(obj_text, str) else obj_text
    vertices: list[list[float]] = []
    facets: list[list[int]] = []
    for lineno, raw in enumerate(lines, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0] == "v":
            try:
                vertices.append([float(t) for t in tokens[1:4]])
            except ValueError as e:
                raise MeshError(f"Line {lineno}: malformed vertex record {raw.strip()!r}") from e
            if len(vertices[-1]) != 3:
                raise MeshError(f"Line {lineno}: vertex record needs three coordinates")
        elif tokens[0] == "f":
            if len(tokens) != 4:
                raise MeshError(f"Line {lineno}: non-triangular facet with {len(tokens) - 1} vertices")
            try:
                indices = [int(t.split("/")[0]) for t in tokens[1:]]
            except ValueError as e:
                raise MeshError(f"Line {lineno}: malformed facet record {raw.strip()!r}") from e
            if min(indices) < 1:
                raise MeshError(f"Line {lineno}: facet index must be 1-based and positive")
            facets.append([i - 1 for i in indices])
    if not vertices or not facets:
        raise MeshError("Mesh has no vertices or no facets")
    logger.debug(f"Parsed mesh with {len(vertices)} vertices and {len(facets)} facets")
    return ShapeModel.from_arrays(np.asarray(vertices), np.asarray(facets, dtype=np.int64), recenter=recenter)


def to_obj_text(shape: ShapeModel) -> str:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in shape.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in shape.facets]
    return "\n".join(lines) + "\n"


def _surface_hits(shape: ShapeModel, points: FloatArray) -> Iterable[tuple[int, npt.NDArray[np.bool_]]]:
    """
    Facet hits of every chunk holding a point near a facet plane.

    Yields ``(start, hits)`` where ``hits[n, f]`` marks point ``start + n`` as lying on facet ``f``.
    """
    tri = shape.triangles
    normals = shape.facet_normals
    tol = ON_SURFACE_TOL * shape.radius
    e0 = tri[:, 1] - tri[:, 0]
    e1 = tri[:, 2] - tri[:, 0]
    d00 = np.einsum("ij,ij->i", e0, e0)
    d01 = np.einsum("ij,ij->i", e0, e1)
    d11 = np.einsum("ij,ij->i", e1, e1)
    denom = d00 * d11 - d01 * d01
    for start, chunk in _chunks(points, len(tri)):
        rel = chunk[:, None, :] - tri[None, :, 0, :]
        height = np.abs(np.einsum("nfi,fi->nf", rel, normals))
        near = height < tol
        if not near.any():
            continue
        d20 = np.einsum("nfi,fi->nf", rel, e0)
        d21 = np.einsum("nfi,fi->nf", rel, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            v = (d11 * d20 - d01 * d21) / denom
            w = (d00 * d21 - d01 * d20) / denom
        slack = 1e-12
        yield start, near & (v >= -slack) & (w >= -slack) & (v + w <= 1.0 + slack)


def _on_surface_facet(shape: ShapeModel, points: FloatArray) -> Optional[tuple[int, int]]:
    """Return ``(point_index, facet_index)`` of the first point lying on a facet, or ``None``."""
    for start, hits in _surface_hits(shape, points):
        if hits.any():
            n, f = np.argwhere(hits)[0]
            return start + int(n), int(f)
    return None


def on_surface_mask(shape: ShapeModel, points: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    """Whether each point lies on a facet, edges and vertices included."""
    pts = as_points(points)
    mask = np.zeros(len(pts), dtype=bool)
    for start, hits in _surface_hits(shape, pts):
        mask[start : start + len(hits)] = hits.any(axis=1)
    return mask


def _chunks(points: FloatArray, n_facets: int) -> Iterable[tuple[int, FloatArray]]:
    step = max(1, _CHUNK_ELEMENTS // max(1, n_facets))
    for start in range(0, len(points), step):
        yield start, points[start : start + step]


def solid_angles(shape: ShapeModel, points: FloatArray) -> FloatArray:
    """
    Signed solid angle of every facet seen from every point, shape ``(N, F)``.

    Positive for a facet whose outward side faces away from the point.
    """
    tri = shape.triangles
    out = np.empty((len(points), len(tri)))
    for start, chunk in _chunks(points, len(tri)):
        r = tri[None, :, :, :] - chunk[:, None, None, :]
        r1, r2, r3 = r[:, :, 0], r[:, :, 1], r[:, :, 2]
        n1, n2, n3 = (np.linalg.norm(v, axis=-1) for v in (r1, r2, r3))
        triple = np.einsum("nfi,nfi->nf", r1, np.cross(r2, r3))
        denom = (
            n1 * n2 * n3
            + n1 * np.einsum("nfi,nfi->nf", r2, r3)
            + n2 * np.einsum("nfi,nfi->nf", r3, r1)
            + n3 * np.einsum("nfi,nfi->nf", r1, r2)
        )
        out[start : start + len(chunk)] = 2.0 * np.arctan2(triple, denom)
    return out


def winding_number(shape: ShapeModel, points: npt.ArrayLike) -> FloatArray:
    """
    Total signed solid angle divided by 4 pi at every point: 1 inside, 0 outside.

    Raises:
        OnSurfaceError: If a point lies on a facet
    """
    pts = as_points(points)
    hit = _on_surface_facet(shape, pts)
    if hit is not None:
        n, f = hit
        raise OnSurfaceError(f"Point {n} at {pts[n].tolist()} lies on facet {f}", facet=f)
    return solid_angles(shape, pts).sum(axis=1) / (4.0 * math.pi)


def contains(shape: ShapeModel, p: npt.ArrayLike) -> bool:
    """
    Whether ``p`` is strictly inside the shape: the facet solid angles sum to 4 pi.

    Raises:
        OnSurfaceError: If ``p`` lies on a facet
    """
    total = 4.0 * math.pi * float(winding_number(shape, p)[0])
    return abs(total - 4.0 * math.pi) < SOLID_ANGLE_TOL


def interior_mask(shape: ShapeModel, points: npt.ArrayLike) -> npt.NDArray[np.bool_]:
    """Vectorised containment by winding number above one half. Points on the surface raise."""
    return winding_number(shape, points) > 0.5


def sample_shell(R: float, r_min: float, r_max: float, n: int, seed: int) -> FloatArray:
    """
    Points with radius uniform on ``[r_min, r_max]`` and direction uniform on the sphere.

    Args:
        R: Body radius; only used to report the band in body radii
        r_min: Lower radius
        r_max: Upper radius
        n: Number of samples
        seed: Generator seed

    Returns:
        Points ``(n, 3)``
    """
    if not 0.0 <= r_min < r_max:
        raise ValueError(f"Expected 0 <= r_min < r_max, got r_min={r_min}, r_max={r_max}")
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    rng = np.random.default_rng(seed)
    radii = rng.uniform(r_min, r_max, n)
    directions = rng.normal(size=(n, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    logger.debug(f"Sampled {n} shell points between {r_min / R:.3g}R and {r_max / R:.3g}R")
    return directions * radii[:, None]


def sample_surface(
    shape: ShapeModel,
    n: int,
    seed: int,
    return_facets: bool = False,
) -> Union[FloatArray, tuple[FloatArray, IntArray]]:
    """
    Points uniform over the surface area.

    Facets are drawn with probability proportional to area, then a point is drawn uniformly inside the facet.
    Zero-area facets are skipped with a warning.
    """
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    areas = shape.facet_areas
    degenerate = areas <= 1e-15 * areas.max()
    if degenerate.any():
        logger.warning(f"Skipping {int(degenerate.sum())} zero-area facets while sampling the surface")
        areas = np.where(degenerate, 0.0, areas)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(areas), size=n, p=areas / areas.sum())
    u1 = np.sqrt(rng.uniform(size=n))
    u2 = rng.uniform(size=n)
    tri = shape.triangles[chosen]
    points = (1.0 - u1)[:, None] * tri[:, 0] + (u1 * (1.0 - u2))[:, None] * tri[:, 1] + (u1 * u2)[:, None] * tri[:, 2]
    if return_facets:
        return points, chosen
    return points


def facet_centroids(shape: ShapeModel) -> FloatArray:
    return shape.triangles.mean(axis=1)


def body_properties(shape: ShapeModel, mu: float) -> BodyProperties:
    """Circumscribing radius, semi-axes from the bounding half-extents and eccentricity."""
    half = np.sort((shape.vertices.max(axis=0) - shape.vertices.min(axis=0)) / 2.0)[::-1]
    a_ax, b_ax, c_ax = (float(v) for v in half)
    return BodyProperties(
        mu=mu,
        R=shape.radius,
        semi_axes=(a_ax, b_ax, c_ax),
        eccentricity=math.sqrt(max(0.0, 1.0 - b_ax**2 / a_ax**2)),
    )


def _orient_outward(vertices: FloatArray, facets: IntArray) -> IntArray:
    """Flip facets of a star-shaped mesh about the origin so their normals point away from it."""
    tri = vertices[facets]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("ij,ij->i", normals, tri.mean(axis=1)) < 0
    oriented = facets.copy()
    oriented[flip] = oriented[flip][:, [0, 2, 1]]
    return oriented


def cube_mesh(half_edge: float = 1.0) -> ShapeModel:
    """Axis-aligned cube ``[-half_edge, half_edge]^3``."""
    corners = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)]) * half_edge
    return ShapeModel.from_arrays(corners, _CUBE_FACETS)


def icosahedron_mesh(radius: float = 1.0) -> ShapeModel:
    verts = _ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True) * radius
    return ShapeModel.from_arrays(verts, _ICOSAHEDRON_FACETS)


def _icosphere_arrays(level: int) -> tuple[FloatArray, IntArray]:
    verts = list(_ICOSAHEDRON_VERTICES / np.linalg.norm(_ICOSAHEDRON_VERTICES, axis=1, keepdims=True))
    facets = _ICOSAHEDRON_FACETS.tolist()
    for _ in range(level):
        midpoint: dict[tuple[int, int], int] = {}

        def split(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in midpoint:
                mid = verts[a] + verts[b]
                verts.append(mid / np.linalg.norm(mid))
                midpoint[key] = len(verts) - 1
            return midpoint[key]

        refined = []
        for a, b, c in facets:
            ab, bc, ca = split(a, b), split(b, c), split(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        facets = refined
    return np.asarray(verts), np.asarray(facets, dtype=np.int64)


def icosphere_mesh(level: int = 2, radius: float = 1.0) -> ShapeModel:
    """Unit icosahedron subdivided ``level`` times and projected onto the sphere."""
    if level < 0:
        raise ValueError(f"level must be non-negative, got {level}")
    verts, facets = _icosphere_arrays(level)
    verts = verts * radius
    return ShapeModel.from_arrays(verts, _orient_outward(verts, facets))


def ellipsoid_mesh(a: float, b: float, c: float, level: int = 2) -> ShapeModel:
    """Icosphere scaled to semi-axes ``(a, b, c)`` along ``(x, y, z)``."""
    if not a >= b >= c > 0:
        raise ValueError(f"Expected a >= b >= c > 0, got {(a, b, c)}")
    verts, facets = _icosphere_arrays(level)
    verts = verts * np.array([a, b, c])
    return ShapeModel.from_arrays(verts, _orient_outward(verts, facets))


BUILTIN_SHAPES = ("cube", "icosahedron", "sphere", "ellipsoid", "eros_coarse")


def builtin_shape(name: str) -> ShapeModel:
    """
    Generate a named builtin mesh.

    ``eros_coarse`` is a level-3 ellipsoid with the 16.0 x 6.0 x 5.5 km semi-axes of 433 Eros, in metres.

    Raises:
        ValueError: If the name is unknown
    """
    if name == "cube":
        return cube_mesh()
    if name == "icosahedron":
        return icosahedron_mesh()
    if name == "sphere":
        return icosphere_mesh(3)
    if name == "ellipsoid":
        return ellipsoid_mesh(2.0, 1.0, 1.0, level=3)
    if name == "eros_coarse":
        return ellipsoid_mesh(*EROS_SEMI_AXES, level=3)
    raise ValueError(f"Unknown builtin shape {name!r}; choose one of {', '.join(BUILTIN_SHAPES)}")
