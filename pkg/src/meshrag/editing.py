"""Incremental editing: keep what already exists, generate only what was added.

Given an initial mesh and a point cloud of the edited object, the initial
mesh is registered onto the edited cloud, every edited point close to the
registered surface is masked out, and only the remaining residual points are
segmented and generated.  The result is the registered initial mesh with the
new parts appended.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyGeometry, EmptyResidual, EmptySegmentation
from .geometry import (
    AffineTransform,
    PointCloud,
    TriangleIndex,
    TriMesh,
    apply_transform,
    compute_aabb,
    concatenate_meshes,
    sample_surface,
)
from .orchestration.pipeline import PipelineReport, generate_parallel
from .retrieval import IcpParams, RegistrationResult, coarse_align, icp_point_to_plane
from .segmentation import SegmentationParams, SegmentLabels, segment_auto

logger = logging.getLogger(__name__)

RESIDUAL_FRACTION = 0.02  # default threshold, fraction of the edited cloud's AABB diagonal


@dataclass
class EditRequest:
    initial_mesh: TriMesh
    edited_cloud: PointCloud
    residual_threshold: float | None = None  # model units; None -> 0.02 x edited AABB diagonal
    icp: IcpParams = field(default_factory=IcpParams)

    def __post_init__(self):
        if len(self.initial_mesh.faces) == 0 or len(self.edited_cloud) == 0:
            raise EmptyGeometry("edit needs a nonempty initial mesh and edited cloud")
        if self.residual_threshold is not None and not self.residual_threshold > 0:
            raise ValueError("residual_threshold must be positive")

    @property
    def eps(self) -> float:
        if self.residual_threshold is not None:
            return float(self.residual_threshold)
        return RESIDUAL_FRACTION * compute_aabb(self.edited_cloud).diagonal


def register_initial(
    initial_mesh: TriMesh,
    edited_cloud: PointCloud,
    icp: IcpParams | None = None,
    seed: int = 0,
    coarse: bool = False,
) -> RegistrationResult:
    """Rigidly register samples of ``initial_mesh`` onto ``edited_cloud``.

    The edited object contains additions, so its bounding box no longer
    describes the initial geometry and box matching would distort it; ICP
    therefore starts from identity.  ``coarse=True`` prepends the bounding
    box stage for inputs that are known to be unedited rescalings.
    """
    icp = icp or IcpParams()
    samples = sample_surface(initial_mesh, icp.sample_count, seed=seed)
    pre = AffineTransform.identity()
    if coarse:
        pre = coarse_align(compute_aabb(initial_mesh), compute_aabb(edited_cloud))
        samples = apply_transform(pre, samples)
    reg = icp_point_to_plane(samples, edited_cloud, icp)
    return RegistrationResult(reg.transform @ pre, reg.rmse, reg.iterations_used, reg.converged,
                              reg.rmse_trace, reg.fitness)


def align_initial(initial_mesh: TriMesh, edited_cloud: PointCloud, icp: IcpParams | None = None,
                  seed: int = 0) -> AffineTransform:
    """Transform placing ``initial_mesh`` onto the edited cloud.

    Raises NoCorrespondences when the two share no geometry.
    """
    return register_initial(initial_mesh, edited_cloud, icp, seed).transform


def residual_mask(edited_cloud: PointCloud, aligned_mesh: TriMesh, eps: float) -> np.ndarray:
    """True for points farther than ``eps`` from the surface of ``aligned_mesh``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return TriangleIndex(aligned_mesh).distance(edited_cloud.positions) > eps


def extract_residual(edited_cloud: PointCloud, aligned_mesh: TriMesh, eps: float) -> PointCloud:
    """Edited points not explained by the aligned initial mesh.

    Raises EmptyResidual when every point lies within ``eps`` of it.
    """
    keep = residual_mask(edited_cloud, aligned_mesh, eps)
    if not keep.any():
        raise EmptyResidual("every edited point lies on the initial mesh")
    return edited_cloud.subset(np.flatnonzero(keep))


@dataclass
class EditReport:
    transform: list[float]
    rmse: float
    eps: float
    n_edited_points: int
    n_residual_points: int
    n_generated_parts: int
    no_changes: bool
    align_seconds: float
    residual_seconds: float
    pipeline: PipelineReport | None = None

    def to_json(self) -> dict:
        return {
            "transform": self.transform,
            "rmse": self.rmse,
            "residual_threshold": self.eps,
            "edited_points": self.n_edited_points,
            "residual_points": self.n_residual_points,
            "generated_parts": self.n_generated_parts,
            "no_changes": self.no_changes,
            "align_seconds": self.align_seconds,
            "residual_seconds": self.residual_seconds,
            "pipeline": None if self.pipeline is None else self.pipeline.to_json(),
        }


def edit_incremental(
    req: EditRequest,
    backend,
    batch_size: int = 8,
    segmenter=None,
    seg_params: SegmentationParams | None = None,
    seed: int = 0,
) -> tuple[TriMesh, EditReport]:
    """Register, subtract, segment the residual, generate it, and merge.

    The initial mesh's vertices appear in the output transformed but
    otherwise untouched, ahead of the new parts.  When nothing is left after
    subtraction the registered initial mesh is returned with
    ``no_changes`` set.
    """
    t0 = time.perf_counter()
    reg = register_initial(req.initial_mesh, req.edited_cloud, req.icp, seed)
    aligned = apply_transform(reg.transform, req.initial_mesh)
    t1 = time.perf_counter()
    eps = req.eps
    keep = residual_mask(req.edited_cloud, aligned, eps)
    t2 = time.perf_counter()
    report = EditReport(reg.transform.to_list(), reg.rmse, eps, len(req.edited_cloud), int(keep.sum()), 0,
                        not keep.any(), t1 - t0, t2 - t1)
    if not keep.any():
        return aligned, report

    residual = req.edited_cloud.subset(np.flatnonzero(keep))
    t3 = time.perf_counter()
    try:
        labels = segment_auto(residual, segmenter, seg_params).labels
    except EmptySegmentation:
        labels = SegmentLabels(np.ones(len(residual), dtype=np.int64), 1)
    mesh_new, pipe = generate_parallel(residual, labels, backend, batch_size, req.icp, seed,
                                       segmentation_seconds=time.perf_counter() - t3)
    report.pipeline = pipe
    report.n_generated_parts = pipe.n_generated
    return concatenate_meshes([aligned, mesh_new]), report
