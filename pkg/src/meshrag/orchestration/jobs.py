"""Request/response records exchanged with generator backends."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from ..geometry import PointCloud, TriMesh, compute_aabb

NORMALIZED_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class GenerationJob:
    """One normalized segment to be turned into a mesh part."""

    part_id: int
    prompt_cloud: PointCloud
    seed: int = 0

    def __post_init__(self):
        if len(self.prompt_cloud) == 0:
            raise ValueError("generation job needs a nonempty prompt cloud")
        longest = float(compute_aabb(self.prompt_cloud).extents.max())
        if abs(longest - 1.0) > NORMALIZED_TOL:
            raise ValueError(f"prompt cloud is not normalized (longest side {longest:.9g})")

    def to_wire(self) -> dict:
        cloud = self.prompt_cloud
        msg = {"part_id": int(self.part_id), "points": cloud.positions.tolist(), "seed": int(self.seed)}
        if cloud.normals is not None:
            msg["normals"] = cloud.normals.tolist()
        return msg

    @classmethod
    def from_wire(cls, msg: dict) -> "GenerationJob":
        normals = msg.get("normals")
        cloud = PointCloud.from_unnormalized(msg["points"], normals) if normals is not None else PointCloud(
            np.asarray(msg["points"], dtype=np.float64))
        return cls(int(msg["part_id"]), cloud, int(msg.get("seed", 0)))


@dataclass(frozen=True, eq=False)
class GenerationResult:
    part_id: int
    mesh: TriMesh
    backend_latency: float = 0.0

    def to_wire(self) -> dict:
        return {"vertices": self.mesh.vertices.tolist(), "faces": self.mesh.faces.tolist()}

    @classmethod
    def from_wire(cls, part_id: int, msg: dict, latency: float = 0.0) -> "GenerationResult":
        verts = np.asarray(msg["vertices"], dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(msg["faces"], dtype=np.int64).reshape(-1, 3)
        return cls(part_id, TriMesh(verts, faces), latency)


class GeneratorBackend(Protocol):
    """Anything that maps a job to a mesh part; must be safe to call from several threads."""

    def generate(self, job: GenerationJob) -> GenerationResult: ...


def plan_batches(jobs: Sequence[GenerationJob], batch_size: int) -> list[list[GenerationJob]]:
    """Split jobs, ordered by part id, into consecutive batches of at most ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ordered = sorted(jobs, key=lambda j: j.part_id)
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]
