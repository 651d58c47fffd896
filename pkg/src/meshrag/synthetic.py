"""Procedural primitives and multi-part scenes with known ground truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import (
    AffineTransform,
    PointCloud,
    TriMesh,
    apply_transform,
    compute_aabb,
    concatenate_meshes,
    normalize_geometry,
    sample_surface,
)


def uv_sphere(radius: float = 1.0, n_lat: int = 16, n_lon: int = 32) -> TriMesh:
    verts = [(0.0, 0.0, radius)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * np.pi * j / n_lon
            verts.append((radius * np.sin(theta) * np.cos(phi), radius * np.sin(theta) * np.sin(phi),
                          radius * np.cos(theta)))
    verts.append((0.0, 0.0, -radius))
    south = len(verts) - 1
    faces = []
    ring = lambda i, j: 1 + (i - 1) * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append((0, ring(1, j), ring(1, j + 1)))
        faces.append((south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)))
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [(a, c, d), (a, d, b)]
    return TriMesh(np.asarray(verts), np.asarray(faces))


def ellipsoid(radii=(1.0, 0.7, 0.5), n_lat: int = 16, n_lon: int = 32) -> TriMesh:
    return apply_transform(AffineTransform.scaling(radii), uv_sphere(1.0, n_lat, n_lon))


def box(size=(1.0, 1.0, 1.0)) -> TriMesh:
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)])
    f = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
         (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TriMesh(v, np.asarray(f))


def cylinder(radius: float = 0.5, height: float = 1.0, segments: int = 32) -> TriMesh:
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    verts = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for j in range(segments):
        k = (j + 1) % segments
        faces += [(j, k, segments + k), (j, segments + k, segments + j),
                  (cb, k, j), (ct, segments + j, segments + k)]
    return TriMesh(verts, np.asarray(faces))


def torus(major: float = 1.0, minor: float = 0.3, n_major: int = 32, n_minor: int = 16) -> TriMesh:
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    verts = np.stack([(major + minor * np.cos(vv)) * np.cos(uu),
                      (major + minor * np.cos(vv)) * np.sin(uu),
                      minor * np.sin(vv)], axis=-1).reshape(-1, 3)
    idx = lambda i, j: (i % n_major) * n_minor + (j % n_minor)  # noqa: E731
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            faces += [(a, b, c), (a, c, d)]
    return TriMesh(verts, np.asarray(faces))


def random_rotation(rng: np.random.Generator, max_degrees: float) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, max_degrees))
    return Rotation.from_rotvec(axis * angle).as_matrix()


def random_primitive(rng: np.random.Generator, smooth_only: bool = False) -> TriMesh:
    """A randomly proportioned primitive of unit-ish size centred at the origin."""
    kinds = ["sphere", "ellipsoid", "torus"] if smooth_only else ["sphere", "ellipsoid", "torus", "box", "cylinder"]
    kind = kinds[int(rng.integers(len(kinds)))]
    if kind == "sphere":
        return uv_sphere(0.5)
    if kind == "ellipsoid":
        return ellipsoid(0.5 * rng.uniform(0.6, 1.0, 3))
    if kind == "torus":
        return torus(0.35, rng.uniform(0.1, 0.15))
    if kind == "box":
        return box(rng.uniform(0.5, 1.0, 3))
    return cylinder(rng.uniform(0.25, 0.5), rng.uniform(0.5, 1.0))


@dataclass
class Scene:
    """Ground-truth parts (in scene frame) and a labeled sampled cloud."""

    parts: list[TriMesh]
    cloud: PointCloud
    labels: np.ndarray  # 1..len(parts)

    @property
    def mesh(self) -> TriMesh:
        return concatenate_meshes(self.parts)


def make_scene(
    n_parts: int,
    seed: int = 0,
    points_per_part: int = 800,
    spacing: float = 1.6,
    smooth_only: bool = True,
    part_scale=(0.6, 1.0),
) -> Scene:
    """Disjoint primitives on a jittered grid, each with a random pose.

    Grid cells are ``spacing`` apart and parts are at most ~1 unit across,
    so neighbouring parts are separated by a clear gap.
    """
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_parts)))
    cells = rng.permutation(side * side)[:n_parts]
    parts, clouds, labels = [], [], []
    for p, cell in enumerate(cells):
        mesh = random_primitive(rng, smooth_only)
        scale = rng.uniform(*part_scale)
        rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
        pos = np.array([cell % side, cell // side, 0.0]) * spacing + rng.uniform(-0.1, 0.1, 3)
        t = AffineTransform.from_rotation(rot * scale, pos)
        placed = apply_transform(t, mesh)
        parts.append(placed)
        s = sample_surface(placed, points_per_part, seed=int(rng.integers(2**31)))
        clouds.append(s)
        labels.append(np.full(points_per_part, p + 1))
    cloud = PointCloud(np.concatenate([c.positions for c in clouds]), np.concatenate([c.normals for c in clouds]))
    return Scene(parts, cloud, np.concatenate(labels))


def normalized_part(mesh: TriMesh) -> TriMesh:
    return normalize_geometry(mesh)[0]


def part_extent(mesh: TriMesh) -> float:
    return float(compute_aabb(mesh).extents.max())
