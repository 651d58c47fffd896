"""Batched part generation, transform retrieval and assembly."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import BackendUnavailable, EmptySegmentation, MeshRagError, PipelineEmpty
from ..geometry import PointCloud, TriMesh, apply_transform, concatenate_meshes, normalize_geometry
from ..retrieval import IcpParams, retrieve_transform
from ..segmentation import SegmentationParams, SegmentLabels, segment_auto
from .jobs import GenerationJob, GenerationResult, plan_batches

logger = logging.getLogger(__name__)

SEG, GEN, COARSE, ICP = "PC Seg.", "Mesh Gen.", "Coarse Align.", "ICP Refine."
STAGES = (SEG, GEN, COARSE, ICP)


@dataclass
class PartRecord:
    part_id: int
    n_points: int
    status: str = "ok"  # or "failed"
    error: str | None = None
    rmse: float | None = None
    iterations: int | None = None
    converged: bool | None = None
    fitness: float | None = None
    backend_latency: float | None = None
    n_vertices: int = 0
    n_faces: int = 0
    transform: list[float] | None = None
    rmse_trace: list[float] = field(default_factory=list)


@dataclass
class PipelineReport:
    """Stage wall times, keyed like the rows of a stage-ablation table, plus per-part records."""

    stage_seconds: dict[str, float]
    total_seconds: float
    parts: list[PartRecord]
    batch_size: int
    n_batches: int

    @property
    def failures(self) -> dict[int, str]:
        return {p.part_id: p.error or "" for p in self.parts if p.status != "ok"}

    @property
    def n_generated(self) -> int:
        return sum(p.status == "ok" for p in self.parts)

    def to_json(self) -> dict:
        return {
            "stages": {k: float(self.stage_seconds.get(k, 0.0)) for k in STAGES},
            "total_seconds": float(self.total_seconds),
            "batch_size": self.batch_size,
            "n_batches": self.n_batches,
            "n_parts": len(self.parts),
            "n_generated": self.n_generated,
            "failures": {str(k): v for k, v in self.failures.items()},
            "parts": [asdict(p) for p in self.parts],
        }


def part_seed(root_seed: int, part_id: int) -> int:
    return int(root_seed) ^ int(part_id)


def generate_parallel(
    cloud: PointCloud,
    labels: SegmentLabels,
    backend,
    batch_size: int = 8,
    icp: IcpParams | None = None,
    seed: int = 0,
    segmentation_seconds: float = 0.0,
) -> tuple[TriMesh, PipelineReport]:
    """Generate one mesh per labeled segment and assemble them in place.

    Each segment is normalized and sent to ``backend.generate``; jobs of one
    batch are in flight together.  Every returned part is registered against
    its segment in the input frame and the transformed parts are
    concatenated in part-id order, so neither batching nor completion order
    changes the output.  Failed parts are left out and listed in the report.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if len(labels) != len(cloud):
        raise ValueError("labels do not match the cloud")
    icp = icp or IcpParams()
    stages = dict.fromkeys(STAGES, 0.0)
    stages[SEG] = float(segmentation_seconds)
    t_start = time.perf_counter()

    segments: dict[int, PointCloud] = {}
    records: dict[int, PartRecord] = {}
    jobs = []
    for pid, idx in labels.part_indices().items():
        if not len(idx):
            continue
        segments[pid] = cloud.subset(idx)
        records[pid] = PartRecord(pid, len(idx))
        try:
            normalized, _ = normalize_geometry(segments[pid])
            jobs.append(GenerationJob(pid, normalized, part_seed(seed, pid)))
        except (MeshRagError, ValueError) as exc:
            records[pid].status, records[pid].error = "failed", f"cannot normalize segment: {exc}"

    batches = plan_batches(jobs, batch_size)
    results: dict[int, GenerationResult] = {}
    unreachable = []
    with ThreadPoolExecutor(max_workers=batch_size) as pool:
        for batch in batches:
            futures = [(job, pool.submit(backend.generate, job)) for job in batch]
            for job, fut in futures:
                try:
                    results[job.part_id] = fut.result()
                except Exception as exc:  # any backend error only costs this part
                    records[job.part_id].status = "failed"
                    records[job.part_id].error = f"{type(exc).__name__}: {exc}"
                    unreachable.append(isinstance(exc, BackendUnavailable))
                    logger.warning("part %d failed: %s", job.part_id, exc)
    t_gen = time.perf_counter()
    stages[GEN] = t_gen - t_start

    seeds = {job.part_id: job.seed for job in jobs}
    placed: dict[int, TriMesh] = {}
    for pid in sorted(results):
        rec, res = records[pid], results[pid]
        rec.backend_latency = res.backend_latency
        try:
            ret = retrieve_transform(res.mesh, segments[pid], icp, seed=seeds[pid])
        except MeshRagError as exc:
            rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
            continue
        stages[COARSE] += ret.coarse_seconds
        placed[pid] = apply_transform(ret.final, res.mesh)
        rec.rmse, rec.iterations = ret.icp.rmse, ret.icp.iterations_used
        rec.converged, rec.fitness = ret.icp.converged, ret.icp.fitness
        rec.transform, rec.rmse_trace = ret.final.to_list(), list(ret.icp.rmse_trace)
        rec.n_vertices, rec.n_faces = len(res.mesh.vertices), len(res.mesh.faces)

    report_parts = [records[p] for p in sorted(records)]
    if not placed:
        failures = {p.part_id: p.error or "" for p in report_parts}
        raise PipelineEmpty(
            "every part failed", failures=failures, unreachable=bool(unreachable) and all(unreachable)
        )
    mesh = concatenate_meshes([placed[p] for p in sorted(placed)])
    t_end = time.perf_counter()
    # everything after generation that is not coarse alignment is ICP and assembly
    stages[ICP] = max(0.0, (t_end - t_gen) - stages[COARSE])
    report = PipelineReport(stages, stages[SEG] + (t_end - t_start), report_parts, batch_size, len(batches))
    return mesh, report


def run_pipeline(
    cloud: PointCloud,
    backend,
    segmenter=None,
    seg_params: SegmentationParams | None = None,
    batch_size: int = 8,
    icp: IcpParams | None = None,
    seed: int = 0,
) -> tuple[TriMesh, PipelineReport, SegmentLabels]:
    """Segment ``cloud`` automatically, then generate and assemble its parts.

    If segmentation finds no part the whole cloud is treated as one segment.
    """
    t0 = time.perf_counter()
    try:
        labels = segment_auto(cloud, segmenter, seg_params).labels
    except EmptySegmentation:
        logger.warning("segmentation found no parts; using the whole cloud as one segment")
        labels = SegmentLabels(np.ones(len(cloud), dtype=np.int64), 1)
    seg_seconds = time.perf_counter() - t0
    mesh, report = generate_parallel(cloud, labels, backend, batch_size, icp, seed, seg_seconds)
    return mesh, report, labels
