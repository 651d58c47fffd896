"""Core geometric types and primitives.

Point clouds and triangle meshes are immutable value objects backed by
read-only float64 numpy arrays, so they can be shared freely between the
worker threads used by the pipeline.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence, TypeVar, Union

import numpy as np
from scipy.spatial import cKDTree

from .errors import BadCount, DegenerateExtent, EmptyGeometry, SingularTransform

NORMAL_TOL = 1e-6


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Positions with optional per-point unit normals.

    ``attributes`` carries extra per-point arrays (PLY properties such as
    ``part_id``, or ``face_index`` for surface samples).
    """

    positions: np.ndarray
    normals: np.ndarray | None = None
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pos)):
            raise ValueError("point positions must be finite")
        object.__setattr__(self, "positions", _frozen(pos))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(nrm) != len(pos):
                raise ValueError(f"{len(nrm)} normals for {len(pos)} points")
            if len(nrm) and not np.all(np.abs(np.linalg.norm(nrm, axis=1) - 1.0) <= NORMAL_TOL):
                raise ValueError("normals must have unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        attrs = {}
        for name, values in self.attributes.items():
            values = np.asarray(values)
            if len(values) != len(pos):
                raise ValueError(f"attribute {name!r} has {len(values)} entries for {len(pos)} points")
            attrs[name] = _frozen(values)
        object.__setattr__(self, "attributes", attrs)

    @classmethod
    def from_unnormalized(cls, positions, normals, **kw) -> "PointCloud":
        """Build a cloud, rescaling ``normals`` to unit length first."""
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        return cls(positions, _unit_rows(n), **kw)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            self.positions[index],
            None if self.normals is None else self.normals[index],
            {k: v[index] for k, v in self.attributes.items()},
        )


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @classmethod
    def cleaned(cls, vertices, faces) -> "TriMesh":
        """Build a mesh, silently dropping faces that repeat a vertex index."""
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
        return cls(vertices, f[keep])

    def __len__(self) -> int:
        return len(self.faces)

    def triangles(self) -> np.ndarray:
        """(F, 3, 3) array of corner coordinates."""
        return self.vertices[self.faces]

    def face_cross(self) -> np.ndarray:
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        return _unit_rows(self.face_cross())

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())


@dataclass(frozen=True)
class Aabb:
    center: np.ndarray
    extents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        e = np.asarray(self.extents, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(e)):
            raise ValueError("AABB must be finite")
        if np.any(e < 0):
            raise ValueError("AABB extents must be non-negative")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "extents", _frozen(e))

    @property
    def min(self) -> np.ndarray:
        return self.center - self.extents / 2

    @property
    def max(self) -> np.ndarray:
        return self.center + self.extents / 2

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extents))


@dataclass(frozen=True)
class AffineTransform:
    """4x4 homogeneous transform acting on column vectors."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("transform must be finite")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be (0, 0, 0, 1)")
        object.__setattr__(self, "matrix", _frozen(m))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def translation(cls, v) -> "AffineTransform":
        m = np.eye(4)
        m[:3, 3] = np.asarray(v, dtype=np.float64).reshape(3)
        return cls(m)

    @classmethod
    def scaling(cls, s) -> "AffineTransform":
        m = np.eye(4)
        m[:3, :3] = np.diag(np.broadcast_to(np.asarray(s, dtype=np.float64), (3,)))
        return cls(m)

    @classmethod
    def from_rotation(cls, rotation, translation=(0.0, 0.0, 0.0)) -> "AffineTransform":
        m = np.eye(4)
        m[:3, :3] = rotation
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "AffineTransform":
        """Inverse of :meth:`to_list` (row-major 16 numbers)."""
        return cls(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def to_list(self) -> list[float]:
        return [float(x) for x in self.matrix.reshape(-1)]

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def __matmul__(self, other: "AffineTransform") -> "AffineTransform":
        if not isinstance(other, AffineTransform):
            return NotImplemented
        out = self.matrix @ other.matrix
        out[3] = (0.0, 0.0, 0.0, 1.0)
        return AffineTransform(out)

    def is_singular(self) -> bool:
        return np.linalg.matrix_rank(self.linear) < 3

    def inverse(self) -> "AffineTransform":
        if self.is_singular():
            raise SingularTransform("linear block is not invertible")
        lin_inv = np.linalg.inv(self.linear)
        m = np.eye(4)
        m[:3, :3] = lin_inv
        m[:3, 3] = -lin_inv @ self.offset
        return AffineTransform(m)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.linear.T + self.offset


class NeighborIndex:
    """Immutable k-nearest-neighbour index over a fixed point set.

    Returned distances are recomputed directly from coordinates so they are
    identical to an exhaustive evaluation of ``||q - p||``.
    """

    def __init__(self, points):
        if isinstance(points, PointCloud):
            points = points.positions
        self.points = _frozen(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        if len(self.points) == 0:
            raise EmptyGeometry("cannot index an empty point set")
        # sliding-midpoint trees build and query faster on surface samples
        self._tree = cKDTree(self.points, balanced_tree=False, compact_nodes=False)

    def __len__(self) -> int:
        return len(self.points)

    def query(self, queries, k: int = 1):
        """Return ``(distances, indices)`` of the ``min(k, N)`` nearest points.

        For ``k == 1`` both arrays are 1-D, otherwise shaped ``(M, k)`` with
        distances nondecreasing along each row.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k_eff = min(int(k), len(self.points))
        if k_eff < 1:
            raise BadCount("k must be at least 1")
        _, idx = self._tree.query(q, k=k_eff)
        if k_eff == 1:
            idx = np.asarray(idx, dtype=np.int64).reshape(-1)
            return _dist(q, self.points[idx]), idx
        idx = np.asarray(idx, dtype=np.int64).reshape(len(q), k_eff)
        d = _dist(q[:, None, :], self.points[idx])
        order = np.argsort(d, axis=1, kind="stable")
        return np.take_along_axis(d, order, 1), np.take_along_axis(idx, order, 1)

    def nearest_within(self, queries, max_distance: float):
        """Nearest neighbour restricted to ``max_distance``.

        Returns ``(distances, indices, found)``; entries with ``found`` False
        have no neighbour in range and carry distance ``inf``, index ``-1``.
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        _, idx = self._tree.query(q, k=1, distance_upper_bound=max_distance)
        idx = np.asarray(idx, dtype=np.int64).reshape(-1)
        found = idx < len(self.points)
        idx = np.where(found, idx, -1)
        d = np.full(len(q), np.inf)
        d[found] = _dist(q[found], self.points[idx[found]])
        found &= d <= max_distance
        return d, idx, found

    def query_radius(self, queries, r):
        return self._tree.query_ball_point(np.asarray(queries, dtype=np.float64).reshape(-1, 3), r)


def _dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(((a - b) ** 2).sum(axis=-1))


def _unit_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


Geometry = TypeVar("Geometry", PointCloud, TriMesh)


def _coords(g) -> np.ndarray:
    if isinstance(g, PointCloud):
        return g.positions
    if isinstance(g, TriMesh):
        return g.vertices
    return np.asarray(g, dtype=np.float64).reshape(-1, 3)


def compute_aabb(g: Union[PointCloud, TriMesh, np.ndarray]) -> Aabb:
    pts = _coords(g)
    if len(pts) == 0:
        raise EmptyGeometry("AABB of an empty point set")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    return Aabb((lo + hi) / 2, hi - lo)


def apply_transform(t: AffineTransform, g: Geometry) -> Geometry:
    """Map positions by ``t``; normals by the inverse-transpose, renormalized."""
    if t.is_singular():
        raise SingularTransform("linear block is not invertible")
    if isinstance(g, TriMesh):
        faces = g.faces
        if np.linalg.det(t.linear) < 0:
            faces = faces[:, ::-1]
        return TriMesh(t.apply_points(g.vertices), faces)
    normals = None
    if g.normals is not None:
        # row-vector form of inv(A).T @ n
        normals = _unit_rows(g.normals @ np.linalg.inv(t.linear))
    return PointCloud(t.apply_points(g.positions), normals, dict(g.attributes))


def normalize_geometry(g: Geometry) -> tuple[Geometry, AffineTransform]:
    """Center on the AABB center and scale the longest side to 1.

    Returns the normalized geometry and the transform mapping it back.
    """
    box = compute_aabb(g)
    longest = float(box.extents.max())
    if longest <= 0.0:
        raise DegenerateExtent("all AABB extents are zero")
    to_original = AffineTransform.translation(box.center) @ AffineTransform.scaling(longest)
    forward = AffineTransform.scaling(1.0 / longest) @ AffineTransform.translation(-box.center)
    return apply_transform(forward, g), to_original


def sample_surface(mesh: TriMesh, n: int, seed: int = 0) -> PointCloud:
    """Area-weighted barycentric sampling; each point carries its face normal.

    The source face of every sample is stored in ``attributes["face_index"]``.
    """
    if n < 1:
        raise BadCount("sample count must be at least 1")
    if len(mesh.faces) == 0:
        raise EmptyGeometry("mesh has no faces")
    cross = mesh.face_cross()
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    if not total > 0:
        raise EmptyGeometry("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1, r2 = rng.random((2, n))
    s = np.sqrt(r1)
    bary = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
    tri = mesh.vertices[mesh.faces[face]]
    points = np.einsum("ij,ijk->ik", bary, tri)
    normals = _unit_rows(cross[face])
    return PointCloud(points, normals, {"face_index": face})


def farthest_point_sample(cloud, k: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy max-min subset of ``k`` point indices.

    The first index comes from ``start`` or, if omitted, from the seeded RNG.
    Ties go to the lowest index.
    """
    pts = _coords(cloud)
    n = len(pts)
    if k < 1 or k > n:
        raise BadCount(f"cannot pick {k} of {n} points")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start
    mind = _dist(pts, pts[start])
    mind[start] = -np.inf
    for i in range(1, k):
        j = int(np.argmax(mind))
        chosen[i] = j
        mind = np.minimum(mind, _dist(pts, pts[j]))
        mind[chosen[: i + 1]] = -np.inf
    return chosen


def concatenate_meshes(meshes: Sequence[TriMesh]) -> TriMesh:
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    if not verts:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


def closest_points_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Vectorized closest point on triangle (a, b, c) to p, row by row.

    Region tests follow Ericson, Real-Time Collision Detection, 5.1.5.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    done = np.zeros(len(p), dtype=bool)

    def take(mask, value):
        nonlocal done
        m = mask & ~done
        out[m] = value[m] if value.ndim == 2 else value
        done |= m

    with np.errstate(divide="ignore", invalid="ignore"):
        take((d1 <= 0) & (d2 <= 0), a)
        take((d3 >= 0) & (d4 <= d3), b)
        v = d1 / (d1 - d3)
        take((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab)
        take((d6 >= 0) & (d5 <= d6), c)
        w = d2 / (d2 - d6)
        take((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac)
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        take((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w[:, None] * (c - b))
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        inside = a + v[:, None] * ab + w[:, None] * ac
        # zero-area triangles fall through every test with NaN weights
        inside = np.where(np.isfinite(inside), inside, a)
        take(np.ones(len(p), dtype=bool), inside)
    return out


class TriangleIndex:
    """Exact unsigned point-to-surface distance over a triangle mesh.

    Candidate faces come from a KD-tree over face centroids: the distance to
    any face is at least ``|p - centroid| - radius``, so after bounding the
    answer with the nearest few faces only the faces inside a ball of
    ``bound + max_radius`` need an exact test.
    """

    def __init__(self, mesh: TriMesh, seed_faces: int = 8, chunk: int = 4096):
        if len(mesh.faces) == 0:
            raise EmptyGeometry("mesh has no faces")
        self._tri = mesh.triangles()
        self._centroids = self._tri.mean(axis=1)
        radii = np.linalg.norm(self._tri - self._centroids[:, None, :], axis=2).max(axis=1)
        self._rmax = float(radii.max())
        self._tree = cKDTree(self._centroids)
        self._seed = min(seed_faces, len(self._tri))
        self._chunk = chunk

    def _exact(self, p: np.ndarray, faces: np.ndarray) -> np.ndarray:
        t = self._tri[faces]
        q = closest_points_on_triangles(p, t[:, 0], t[:, 1], t[:, 2])
        return _dist(p, q)

    def distance(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(pts))
        for s in range(0, len(pts), self._chunk):
            out[s : s + self._chunk] = self._distance_chunk(pts[s : s + self._chunk])
        return out

    def _distance_chunk(self, pts: np.ndarray) -> np.ndarray:
        if len(pts) == 0:
            return np.zeros(0)
        _, near = self._tree.query(pts, k=self._seed)
        near = np.asarray(near).reshape(len(pts), self._seed)
        rows = np.repeat(np.arange(len(pts)), self._seed)
        bound = self._exact(pts[rows], near.reshape(-1)).reshape(len(pts), self._seed).min(axis=1)
        if self._seed == len(self._tri):
            return bound
        balls = self._tree.query_ball_point(pts, bound + self._rmax + 1e-12)
        counts = np.fromiter((len(b) for b in balls), dtype=np.int64, count=len(balls))
        rows = np.repeat(np.arange(len(pts)), counts)
        cand = np.fromiter(itertools.chain.from_iterable(balls), dtype=np.int64, count=int(counts.sum()))
        d = self._exact(pts[rows], cand)
        best = bound.copy()
        np.minimum.at(best, rows, d)
        return best
