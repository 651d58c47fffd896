"""Transform retrieval: place a normalized generated part back where its
point-cloud segment lives.

The coarse stage matches axis-aligned bounding boxes (translate to origin,
scale per axis, translate to the segment center); point-to-plane ICP then
removes the small residual rigid motion.  The final transform is
``icp @ coarse``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateExtent, NoCorrespondences, NoNormals
from .geometry import (
    Aabb,
    AffineTransform,
    NeighborIndex,
    PointCloud,
    TriMesh,
    apply_transform,
    compute_aabb,
    sample_surface,
)

# extents at or below this are treated as flat
DEGENERATE_EXTENT = 1e-12
# source points used while searching over scale refits
EXPLORE_SAMPLES = 2048
# smallest fraction of a Gauss-Newton step tried before giving up
MIN_STEP = 0.25


@dataclass
class IcpParams:
    max_iterations: int = 50
    max_correspondence_distance: float = 0.1  # fraction of the target AABB diagonal
    convergence_tol: float = 1e-6  # relative rmse change
    sample_count: int = 8192
    scale_refits: int = 2

    def __post_init__(self):
        if self.max_iterations < 1 or self.sample_count < 1:
            raise ValueError("max_iterations and sample_count must be positive")
        if self.max_correspondence_distance <= 0:
            raise ValueError("max_correspondence_distance must be positive")
        if not 0 < self.convergence_tol < 1:
            raise ValueError("convergence_tol must lie in (0, 1)")
        if self.scale_refits < 0:
            raise ValueError("scale_refits must be >= 0")


@dataclass
class RegistrationResult:
    transform: AffineTransform
    rmse: float
    iterations_used: int
    converged: bool
    rmse_trace: list[float] = field(default_factory=list)
    fitness: float = 0.0  # fraction of source points with a correspondence


def coarse_align(part_box: Aabb, target_box: Aabb) -> AffineTransform:
    """``T(c_target) @ S(e_target / e_part) @ T(-c_part)``.

    Axes where either extent is zero keep a scale of 1.
    """
    flat = (part_box.extents <= DEGENERATE_EXTENT) | (target_box.extents <= DEGENERATE_EXTENT)
    scale = np.ones(3)
    np.divide(target_box.extents, part_box.extents, out=scale, where=~flat)
    return (
        AffineTransform.translation(target_box.center)
        @ AffineTransform.scaling(scale)
        @ AffineTransform.translation(-part_box.center)
    )


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    if np.linalg.det(u @ vt) < 0:
        u[:, -1] *= -1
    return u @ vt


class _Matcher:
    """Nearest-neighbour correspondences and point-to-plane residuals."""

    def __init__(self, source: np.ndarray, target: PointCloud, index: NeighborIndex, max_dist: float):
        self.source = source
        self.tp = target.positions
        self.tn = target.normals
        self.index = index
        self.max_dist = max_dist

    def __call__(self, rot: np.ndarray, trans: np.ndarray):
        moved = self.source @ rot.T + trans
        _, j, keep = self.index.nearest_within(moved, self.max_dist)
        src, tgt, nrm = moved[keep], self.tp[j[keep]], self.tn[j[keep]]
        res = np.einsum("ij,ij->i", src - tgt, nrm)
        rmse = float(np.sqrt(np.mean(res**2))) if len(res) else np.inf
        return src, tgt, nrm, res, rmse, float(keep.mean())


def _linearized_step(src, tgt, nrm, res) -> tuple[np.ndarray, np.ndarray]:
    """One Gauss-Newton step for sum(((R s + t - q) . n)^2) about the source centroid."""
    c = src.mean(axis=0)
    jac = np.hstack([np.cross(src - c, nrm), nrm])
    a = jac.T @ jac
    b = -jac.T @ res
    x = np.linalg.lstsq(a, b, rcond=None)[0]
    rot = Rotation.from_rotvec(x[:3]).as_matrix()
    return rot, c + x[3:] - rot @ c


def icp_point_to_plane(
    source,
    target: PointCloud,
    params: IcpParams | None = None,
    index: NeighborIndex | None = None,
    init: AffineTransform | None = None,
) -> RegistrationResult:
    """Rigid point-to-plane ICP of ``source`` onto ``target``.

    Starts from ``init`` (identity by default).  A step that would raise the
    rmse is retried at half length, so the recorded rmse trace never
    increases; once the step falls below ``MIN_STEP`` the registration is
    considered settled.

    Raises NoCorrespondences when no source point lies within the
    correspondence distance of the target at the start.
    """
    params = params or IcpParams()
    if target.normals is None:
        raise NoNormals("point-to-plane ICP needs target normals")
    src = source.positions if isinstance(source, PointCloud) else np.asarray(source, dtype=np.float64)
    index = index or NeighborIndex(target)
    max_dist = params.max_correspondence_distance * compute_aabb(target).diagonal
    match = _Matcher(src, target, index, max_dist)

    start = init.matrix if init is not None else np.eye(4)
    rot, trans = _orthonormalize(start[:3, :3]), start[:3, 3].copy()
    state = match(rot, trans)
    if not len(state[3]):
        raise NoCorrespondences("no source point lies within the correspondence distance of the target")
    rmse = state[4]
    trace = [rmse]
    converged = False
    step = 1.0
    it = 0
    while it < params.max_iterations:
        it += 1
        if rmse <= 1e-15:
            converged = True
            break
        d_rot, d_trans = _linearized_step(*state[:4])
        if step != 1.0:
            d_rot = Rotation.from_rotvec(step * Rotation.from_matrix(d_rot).as_rotvec()).as_matrix()
            d_trans = step * d_trans
        new_rot = _orthonormalize(d_rot @ rot)
        new_trans = d_rot @ trans + d_trans
        new_state = match(new_rot, new_trans)
        new_rmse = new_state[4]
        if not new_rmse <= rmse:
            step *= 0.5
            if step < MIN_STEP:
                converged = True
                break
            continue
        rel = (rmse - new_rmse) / rmse
        rot, trans, state, rmse = new_rot, new_trans, new_state, new_rmse
        trace.append(rmse)
        step = 1.0
        if rel < params.convergence_tol:
            converged = True
            break
    return RegistrationResult(
        transform=AffineTransform.from_rotation(rot, trans),
        rmse=rmse,
        iterations_used=it,
        converged=converged,
        rmse_trace=trace,
        fitness=state[5],
    )


@dataclass
class RetrievalResult:
    """``final == icp.transform @ restore`` exactly (as a matrix product)."""

    final: AffineTransform
    restore: AffineTransform
    icp: RegistrationResult
    coarse_seconds: float = 0.0
    icp_seconds: float = 0.0


def retrieve_transform(
    part_mesh: TriMesh,
    target_segment: PointCloud,
    params: IcpParams | None = None,
    seed: int = 0,
    target_index: NeighborIndex | None = None,
) -> RetrievalResult:
    """Recover the transform placing ``part_mesh`` onto ``target_segment``.

    Coarse AABB matching, surface sampling of the part, then point-to-plane
    ICP from identity.  With ``scale_refits > 0`` the per-axis scale is
    re-estimated that many times in the frame found by the previous ICP
    (the target box is measured after undoing the ICP rotation) and ICP is
    rerun from that rotation; a refit is kept only if it lowers the rmse.
    These exploratory runs use the first ``EXPLORE_SAMPLES`` source points;
    a final run on all samples polishes the winner.
    """
    params = params or IcpParams()
    if target_segment.normals is None:
        raise NoNormals("retrieval needs target normals")
    if len(part_mesh.faces) == 0 or not part_mesh.area > 0:
        raise DegenerateExtent("part mesh has no surface to register")
    t0 = time.perf_counter()
    part_box = compute_aabb(part_mesh)
    restore = coarse_align(part_box, compute_aabb(target_segment))
    samples = sample_surface(part_mesh, params.sample_count, seed=seed)
    coarse_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    index = target_index or NeighborIndex(target_segment)
    # explore (first pass and scale refits) on a subsample, polish on all samples
    explore = samples
    if params.scale_refits and len(samples) > EXPLORE_SAMPLES:
        explore = samples.subset(np.arange(EXPLORE_SAMPLES))
    reg = icp_point_to_plane(apply_transform(restore, explore), target_segment, params, index=index)
    for _ in range(params.scale_refits):
        rot = reg.transform.linear
        # target expressed in the ICP frame: undo the rotation, measure its box there
        refit = coarse_align(part_box, compute_aabb(target_segment.positions @ rot))
        reg_r = icp_point_to_plane(apply_transform(refit, explore), target_segment, params, index=index,
                                   init=AffineTransform.from_rotation(rot))
        if reg_r.rmse < reg.rmse:
            restore, reg = refit, reg_r
        else:
            break
    if explore is not samples:
        reg = icp_point_to_plane(apply_transform(restore, samples), target_segment, params, index=index,
                                 init=reg.transform)
    icp_seconds = time.perf_counter() - t1
    return RetrievalResult(reg.transform @ restore, restore, reg, coarse_seconds, icp_seconds)
