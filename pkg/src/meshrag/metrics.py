"""Geometric fidelity metrics between sampled surfaces.

All distances are nearest-neighbour distances between point sets; the
pairwise metrics are symmetric averages of the two directions.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import EmptyGeometry, NoNormals
from .geometry import NeighborIndex, PointCloud, TriangleIndex, TriMesh, normalize_geometry, sample_surface

METRIC_COLUMNS = ("cd_l1", "cd_l2", "hd", "nc", "f1", "ecd", "ef1")


def _positions(x) -> np.ndarray:
    pts = x.positions if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyGeometry("metric on an empty point set")
    return pts


def nn_distances(a, b) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    return NeighborIndex(_positions(b)).query(_positions(a), k=1)[0]


def chamfer(a, b) -> tuple[float, float]:
    """(L1, L2) Chamfer: mean and root-mean-square NN distance, averaged over both directions."""
    ab, ba = nn_distances(a, b), nn_distances(b, a)
    l1 = 0.5 * (ab.mean() + ba.mean())
    l2 = 0.5 * (np.sqrt(np.mean(ab**2)) + np.sqrt(np.mean(ba**2)))
    return float(l1), float(l2)


def hausdorff(a, b) -> float:
    return float(max(nn_distances(a, b).max(), nn_distances(b, a).max()))


def normal_consistency(a: PointCloud, b: PointCloud) -> float:
    if a.normals is None or b.normals is None:
        raise NoNormals("normal consistency needs normals on both clouds")
    _, ia = NeighborIndex(b).query(_positions(a), k=1)
    _, ib = NeighborIndex(a).query(_positions(b), k=1)
    ab = np.abs(np.einsum("ij,ij->i", a.normals, b.normals[ia])).mean()
    ba = np.abs(np.einsum("ij,ij->i", b.normals, a.normals[ib])).mean()
    return float(0.5 * (ab + ba))


def fscore(a, b, tau: float) -> float:
    """Harmonic mean of precision (a near b) and recall (b near a) at distance < tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    precision = float(np.mean(nn_distances(a, b) < tau))
    recall = float(np.mean(nn_distances(b, a) < tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def extract_edges(cloud: PointCloud, k: int = 10, angle_threshold: float = 30.0) -> PointCloud:
    """Points whose normal deviates from some k-NN neighbour's by more than the threshold.

    Normals are compared without orientation, so flipped faces do not read
    as creases.
    """
    if cloud.normals is None:
        raise NoNormals("edge extraction needs normals")
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(cloud) < 2:
        return cloud.subset(np.zeros(0, dtype=np.int64))
    _, nbr = NeighborIndex(cloud).query(cloud.positions, k=k + 1)
    nbr = nbr[:, 1:]
    cos = np.abs(np.einsum("ij,ikj->ik", cloud.normals, cloud.normals[nbr]))
    keep = cos.min(axis=1) < np.cos(np.radians(angle_threshold))
    return cloud.subset(np.flatnonzero(keep))


@dataclass
class MetricParams:
    sample_count: int = 8192
    tau_f1: float = 0.02
    edge_k: int = 10
    edge_angle: float = 30.0
    seed: int = 0
    normalize: bool = True


@dataclass
class MetricsReport:
    cd_l1: float
    cd_l2: float
    hd: float
    nc: float
    f1: float
    ecd: float
    ef1: float
    sample_count: int
    tau_f1: float
    edge_k: int
    edge_angle: float
    edges_empty: bool = False
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_clouds(pred: PointCloud, gt: PointCloud, params: MetricParams | None = None) -> MetricsReport:
    params = params or MetricParams()
    t0 = time.perf_counter()
    l1, l2 = chamfer(pred, gt)
    pe = extract_edges(pred, params.edge_k, params.edge_angle)
    ge = extract_edges(gt, params.edge_k, params.edge_angle)
    empty = len(pe) == 0 or len(ge) == 0
    if empty:
        ecd, ef1 = math.sqrt(3.0), 0.0
    else:
        ecd, ef1 = chamfer(pe, ge)[0], fscore(pe, ge, params.tau_f1)
    return MetricsReport(
        cd_l1=l1,
        cd_l2=l2,
        hd=hausdorff(pred, gt),
        nc=normal_consistency(pred, gt),
        f1=fscore(pred, gt, params.tau_f1),
        ecd=ecd,
        ef1=ef1,
        sample_count=len(pred),
        tau_f1=params.tau_f1,
        edge_k=params.edge_k,
        edge_angle=params.edge_angle,
        edges_empty=empty,
        seconds=time.perf_counter() - t0,
    )


def evaluate_all(pred: TriMesh, gt: TriMesh, params: MetricParams | None = None) -> MetricsReport:
    """Normalize both meshes, sample them with the same seed, compute every metric.

    When either edge set is empty, ECD falls back to sqrt(3) (the diagonal of
    the normalized frame), EF1 to 0, and ``edges_empty`` is set.
    """
    params = params or MetricParams()
    t0 = time.perf_counter()
    if params.normalize:
        pred, _ = normalize_geometry(pred)
        gt, _ = normalize_geometry(gt)
    ps = sample_surface(pred, params.sample_count, seed=params.seed)
    gs = sample_surface(gt, params.sample_count, seed=params.seed)
    report = evaluate_clouds(ps, gs, params)
    report.seconds = time.perf_counter() - t0
    return report


def surface_chamfer(a: TriMesh, b: TriMesh, n: int = 4096, seed: int = 0) -> tuple[float, float]:
    """(L1, L2) Chamfer using exact point-to-surface distances.

    Samples of each mesh are measured against the other mesh's triangles
    rather than against the other's samples, so two coincident surfaces
    score zero regardless of how they were tessellated or sampled.
    """
    sa = sample_surface(a, n, seed=seed)
    sb = sample_surface(b, n, seed=seed + 1)
    ab = TriangleIndex(b).distance(sa.positions)
    ba = TriangleIndex(a).distance(sb.positions)
    l1 = 0.5 * (ab.mean() + ba.mean())
    l2 = 0.5 * (np.sqrt(np.mean(ab**2)) + np.sqrt(np.mean(ba**2)))
    return float(l1), float(l2)


def aggregate(reports: list[MetricsReport]) -> dict[str, float]:
    if not reports:
        return {}
    return {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_COLUMNS}


def reports_to_csv(rows: list[tuple[str, MetricsReport, float | None]], include_mean: bool = True) -> str:
    """CSV with one row per object plus a ``mean`` row.

    ``rows`` holds ``(name, report, generation_seconds)``; the ``T`` column is
    left blank when no generation time is known.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", *[c.upper() for c in METRIC_COLUMNS], "T"])
    for name, rep, t in rows:
        w.writerow([name, *[repr(getattr(rep, c)) for c in METRIC_COLUMNS], "" if t is None else repr(t)])
    if include_mean and rows:
        means = aggregate([r for _, r, _ in rows])
        times = [t for _, _, t in rows if t is not None]
        w.writerow(["mean", *[repr(means[c]) for c in METRIC_COLUMNS], repr(float(np.mean(times))) if times else ""])
    return buf.getvalue()


REPORT_FIELDS = tuple(f.name for f in fields(MetricsReport))
