"""Automatic point-cloud part segmentation.

Pipeline: normalize, pick farthest-point prompts, ask a prompt segmenter for
three candidate masks per prompt, keep the best, cluster with greedy NMS,
drop clusters with too few members, merge clusters whose oriented boxes
overlap, reinstate discarded masks that mostly cover unassigned points, and
finally paint labels largest-cluster-first.

The neural prompt segmenter is pluggable: anything callable as
``backend(cloud, prompt_index) -> (masks[3, N] bool, scores[3])`` works.
:class:`GeometricSegmenter` is a deterministic region-growing stand-in.
"""

from __future__ import annotations

import logging
import threading
import weakref
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import BackendFailure, EmptySegmentation, NoNormals
from .geometry import NeighborIndex, PointCloud, farthest_point_sample, normalize_geometry

logger = logging.getLogger(__name__)

SegmenterBackend = Callable[[PointCloud, int], "tuple[np.ndarray, np.ndarray]"]


@dataclass(frozen=True, eq=False)
class MaskCandidate:
    mask: np.ndarray
    score: float
    prompt_index: int

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"mask score {self.score} outside [0, 1]")

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass(frozen=True, eq=False)
class SegmentLabels:
    """Per-point part ids; 0 means unassigned, parts are 1..n_parts."""

    labels: np.ndarray
    n_parts: int

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.int64)
        if len(lab) and (lab.min() < 0 or lab.max() > self.n_parts):
            raise ValueError("label values must lie in 0..n_parts")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return len(self.labels)

    def part_indices(self) -> dict[int, np.ndarray]:
        return {p: np.flatnonzero(self.labels == p) for p in range(1, self.n_parts + 1)}

    def to_json(self) -> dict:
        return {"n_parts": int(self.n_parts), "labels": [int(x) for x in self.labels]}

    @classmethod
    def from_json(cls, data: dict) -> "SegmentLabels":
        return cls(np.asarray(data["labels"], dtype=np.int64), int(data["n_parts"]))


@dataclass
class SegmentationParams:
    n_prompts: int = 64
    tau_nms: float = 0.5
    tau_merge: float = 0.5
    tau_recover: float = 0.7
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_prompts < 1:
            raise ValueError("n_prompts must be >= 1")
        for name in ("tau_nms", "tau_merge", "tau_recover"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class Segmentation:
    """Result of :func:`segment_auto`.

    ``raw`` holds the labels exactly as painted by the cluster pass (with 0
    for points no cluster reached); ``labels`` additionally attaches those
    leftovers to their nearest labeled neighbour and is what the split
    clouds are built from.  Parts and index maps are in the input frame.
    """

    labels: SegmentLabels
    raw: SegmentLabels
    parts: list[PointCloud]
    indices: list[np.ndarray]
    candidates: list[MaskCandidate] = field(repr=False)
    clusters: list[list[int]] = field(repr=False)
    unassigned_before_recovery: float = 0.0
    unassigned_after_recovery: float = 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def nms_cluster(candidates: Sequence[MaskCandidate], tau_nms: float) -> list[list[int]]:
    """Greedy NMS clustering of score-sorted candidates.

    A candidate joins the first cluster whose representative (its first,
    highest-scoring member) overlaps it with IoU above ``tau_nms``; otherwise
    it founds a new cluster.
    """
    clusters: list[list[int]] = []
    for i, cand in enumerate(candidates):
        for members in clusters:
            if mask_iou(candidates[members[0]].mask, cand.mask) > tau_nms:
                members.append(i)
                break
        else:
            clusters.append([i])
    return clusters


def filter_small_clusters(clusters: Sequence[Sequence[int]], min_members: int = 2) -> list[list[int]]:
    """Keep clusters with strictly more than ``min_members`` masks."""
    return [list(c) for c in clusters if len(c) > min_members]


def union_mask(cluster: Sequence[int], candidates: Sequence[MaskCandidate]) -> np.ndarray:
    out = np.zeros(len(candidates[cluster[0]].mask), dtype=bool)
    for i in cluster:
        out |= candidates[i].mask
    return out


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray  # columns are the box axes
    half_extents: np.ndarray

    @classmethod
    def from_points(cls, points: np.ndarray) -> "OrientedBox":
        """PCA-aligned box tightly enclosing ``points``."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        mean = pts.mean(axis=0)
        if len(pts) > 1:
            _, vecs = np.linalg.eigh(np.cov((pts - mean).T))
        else:
            vecs = np.eye(3)
        local = (pts - mean) @ vecs
        lo, hi = local.min(axis=0), local.max(axis=0)
        half = (hi - lo) / 2
        # flat or point-like clusters still need a nonzero volume
        half = np.maximum(half, max(1e-3 * half.max(), 1e-9))
        return cls(mean + vecs @ ((lo + hi) / 2), vecs, half)

    @property
    def volume(self) -> float:
        return float(np.prod(2 * self.half_extents))

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = (points - self.center) @ self.axes
        return np.all(np.abs(local) <= self.half_extents * (1 + 1e-12), axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        local = rng.uniform(-1.0, 1.0, (n, 3)) * self.half_extents
        return self.center + local @ self.axes.T


def obb_iou(a: OrientedBox, b: OrientedBox, n_samples: int = 4096, seed: int = 0) -> float:
    """Monte-Carlo IoU of two oriented boxes.

    Samples are drawn from the volume-weighted mixture of both boxes, whose
    density is ``(1_A + 1_B) / (V_A + V_B)``; under it the intersection
    volume is ``(V_A + V_B) / 2`` times the fraction landing in both.
    """
    va, vb = a.volume, b.volume
    rng = np.random.default_rng(seed)
    na = int(round(n_samples * va / (va + vb)))
    pts = np.concatenate([a.sample(na, rng), b.sample(n_samples - na, rng)])
    both = np.count_nonzero(a.contains(pts) & b.contains(pts)) / n_samples
    inter = (va + vb) / 2 * both
    return float(inter / (va + vb - inter))


def merge_by_obb_iou(
    clusters: Sequence[Sequence[int]],
    candidates: Sequence[MaskCandidate],
    cloud: PointCloud,
    tau_merge: float,
    n_samples: int = 4096,
    seed: int = 0,
) -> list[list[int]]:
    """Merge cluster pairs whose union-mask OBBs overlap with IoU > tau, to fixpoint."""
    merged = [list(c) for c in clusters]
    boxes = [OrientedBox.from_points(cloud.positions[union_mask(c, candidates)]) for c in merged]
    changed = True
    while changed:
        changed = False
        for i in range(len(merged)):
            for j in range(i + 1, len(merged)):
                if obb_iou(boxes[i], boxes[j], n_samples, seed) > tau_merge:
                    merged[i] = merged[i] + merged[j]
                    del merged[j], boxes[j]
                    boxes[i] = OrientedBox.from_points(cloud.positions[union_mask(merged[i], candidates)])
                    changed = True
                    break
            if changed:
                break
    return merged


def unassigned_mask(clusters: Sequence[Sequence[int]], candidates: Sequence[MaskCandidate]) -> np.ndarray:
    u = np.ones(len(candidates[0].mask), dtype=bool) if candidates else np.zeros(0, dtype=bool)
    for c in clusters:
        for i in c:
            u &= ~candidates[i].mask
    return u


def recover_unassigned(
    clusters: Sequence[Sequence[int]],
    candidates: Sequence[MaskCandidate],
    tau_recover: float,
) -> list[list[int]]:
    """Reinstate discarded masks that are mostly unassigned, in candidate order.

    A discarded mask becomes a new singleton cluster when the fraction of its
    points still unassigned exceeds ``tau_recover``; its points are then
    marked assigned before the next mask is considered.
    """
    out = [list(c) for c in clusters]
    used = {i for c in out for i in c}
    u = unassigned_mask(out, candidates)
    for i, cand in enumerate(candidates):
        if i in used:
            continue
        size = cand.size
        if size and np.count_nonzero(cand.mask & u) / size > tau_recover:
            out.append([i])
            u &= ~cand.mask
    return out


def assign_labels(clusters: Sequence[Sequence[int]], candidates: Sequence[MaskCandidate]) -> SegmentLabels:
    """Paint clusters largest-first so smaller ones win contested points.

    Area is the union-mask point count.  Ids are compacted to 1..n_parts in
    painting order.
    """
    n = len(candidates[0].mask) if candidates else 0
    masks = [union_mask(c, candidates) for c in clusters]
    order = sorted(range(len(masks)), key=lambda i: -np.count_nonzero(masks[i]))
    raw = np.zeros(n, dtype=np.int64)
    for rank, i in enumerate(order, start=1):
        raw[masks[i]] = rank
    present = np.unique(raw[raw > 0])
    remap = np.zeros(len(masks) + 1, dtype=np.int64)
    remap[present] = np.arange(1, len(present) + 1)
    return SegmentLabels(remap[raw], len(present))


def fill_unassigned(labels: SegmentLabels, cloud: PointCloud) -> SegmentLabels:
    """Give every 0-labeled point the label of its nearest labeled point."""
    lab = labels.labels.copy()
    holes = lab == 0
    if not holes.any() or holes.all():
        return labels
    known = np.flatnonzero(~holes)
    _, nn = NeighborIndex(cloud.positions[known]).query(cloud.positions[holes], k=1)
    lab[holes] = lab[known[nn]]
    return SegmentLabels(lab, labels.n_parts)


def best_of_three(masks: np.ndarray, scores: np.ndarray, prompt_index: int) -> MaskCandidate:
    j = int(np.argmax(scores))
    return MaskCandidate(masks[j], float(scores[j]), prompt_index)


def segment_auto(
    cloud: PointCloud,
    backend: SegmenterBackend | None = None,
    params: SegmentationParams | None = None,
) -> Segmentation:
    params = params or SegmentationParams()
    backend = backend or builtin_geometric_backend
    if cloud.normals is None:
        raise NoNormals("segmentation needs per-point normals")
    n = len(cloud)
    normalized, _ = normalize_geometry(cloud)
    prompts = farthest_point_sample(normalized, min(params.n_prompts, n), seed=params.seed)

    def ask(prompt: int) -> MaskCandidate:
        try:
            masks, scores = backend(normalized, int(prompt))
        except BackendFailure:
            raise
        except Exception as exc:
            raise BackendFailure(f"segmenter failed on prompt {prompt}: {exc}", key=int(prompt)) from exc
        masks = np.asarray(masks, dtype=bool)
        scores = np.asarray(scores, dtype=np.float64)
        if masks.shape != (3, n) or scores.shape != (3,):
            raise BackendFailure(f"segmenter returned masks {masks.shape}, scores {scores.shape}", key=int(prompt))
        return best_of_three(masks, scores, int(prompt))

    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as pool:
            found = list(pool.map(ask, prompts))
    else:
        found = [ask(p) for p in prompts]

    candidates = sorted(found, key=lambda c: -c.score)  # stable: FPS order breaks ties
    clusters = nms_cluster(candidates, params.tau_nms)
    clusters = filter_small_clusters(clusters)
    clusters = merge_by_obb_iou(clusters, candidates, normalized, params.tau_merge, seed=params.seed)
    before = float(unassigned_mask(clusters, candidates).mean())
    clusters = recover_unassigned(clusters, candidates, params.tau_recover)
    after = float(unassigned_mask(clusters, candidates).mean())
    if not clusters:
        raise EmptySegmentation("no cluster survived filtering and recovery")
    raw = assign_labels(clusters, candidates)
    labels = fill_unassigned(raw, cloud)
    indices = [labels.part_indices()[p] for p in range(1, labels.n_parts + 1)]
    logger.debug("segmented %d points into %d parts (%d candidates)", n, labels.n_parts, len(candidates))
    return Segmentation(
        labels=labels,
        raw=raw,
        parts=[cloud.subset(ix) for ix in indices],
        indices=indices,
        candidates=candidates,
        clusters=clusters,
        unassigned_before_recovery=before,
        unassigned_after_recovery=after,
    )


def split_by_labels(cloud: PointCloud, labels: SegmentLabels) -> tuple[list[PointCloud], list[np.ndarray]]:
    indices = [ix for _, ix in sorted(labels.part_indices().items()) if len(ix)]
    return [cloud.subset(ix) for ix in indices], indices


class GeometricSegmenter:
    """Region growing over k-NN graphs at three neighbourhood sizes.

    An edge between neighbours is traversable when their (unoriented)
    normals differ by less than ``max_angle`` degrees and the edge is
    shorter than ``radius_factor`` times the median k-th neighbour distance.
    The region grown from a prompt is its connected component in that
    graph; the score is the mean ``|n_i . n_j|`` over the region's edges.
    Components are cached per cloud object.
    """

    deterministic = True

    def __init__(self, scales: Sequence[int] = (8, 16, 32), max_angle: float = 35.0, radius_factor: float = 2.0):
        self.scales = tuple(int(k) for k in scales)
        self.max_angle = float(max_angle)
        self.radius_factor = float(radius_factor)
        self._cache: "weakref.WeakKeyDictionary[PointCloud, list]" = weakref.WeakKeyDictionary()
        self._lock = threading.Lock()

    def components(self, cloud: PointCloud) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per scale: (component id per point, coherence score per component)."""
        with self._lock:
            hit = self._cache.get(cloud)
        if hit is not None:
            return hit
        if cloud.normals is None:
            raise NoNormals("geometric segmenter needs normals")
        n = len(cloud)
        kmax = min(max(self.scales), n - 1)
        out = []
        if kmax < 1:
            out = [(np.zeros(n, dtype=np.int64), np.zeros(1)) for _ in self.scales]
        else:
            dist, nbr = NeighborIndex(cloud).query(cloud.positions, k=kmax + 1)
            cos_limit = np.cos(np.radians(self.max_angle))
            for k in self.scales:
                k = min(k, kmax)
                d, j = dist[:, 1 : k + 1], nbr[:, 1 : k + 1]
                i = np.repeat(np.arange(n), k)
                j = j.reshape(-1)
                coherence = np.abs(np.einsum("ij,ij->i", cloud.normals[i], cloud.normals[j]))
                radius = self.radius_factor * float(np.median(d[:, -1]))
                ok = (coherence > cos_limit) & (d.reshape(-1) < radius)
                graph = coo_matrix((np.ones(ok.sum()), (i[ok], j[ok])), shape=(n, n))
                n_comp, comp = connected_components(graph, directed=False)
                edge_comp = comp[i[ok]]
                total = np.bincount(edge_comp, weights=coherence[ok], minlength=n_comp)
                count = np.bincount(edge_comp, minlength=n_comp)
                score = np.divide(total, count, out=np.zeros(n_comp), where=count > 0)
                out.append((comp, np.clip(score, 0.0, 1.0)))
        with self._lock:
            self._cache[cloud] = out
        return out

    def __call__(self, cloud: PointCloud, prompt_index: int) -> tuple[np.ndarray, np.ndarray]:
        masks, scores = [], []
        for comp, score in self.components(cloud):
            c = comp[prompt_index]
            masks.append(comp == c)
            scores.append(score[c])
        return np.stack(masks), np.asarray(scores)


builtin_geometric_backend = GeometricSegmenter()
