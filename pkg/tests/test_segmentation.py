import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from meshrag.errors import BackendFailure, EmptySegmentation, NoNormals
from meshrag.geometry import AffineTransform, PointCloud, apply_transform, concatenate_meshes, sample_surface
from meshrag.segmentation import (
    GeometricSegmenter,
    MaskCandidate,
    OrientedBox,
    SegmentationParams,
    SegmentLabels,
    assign_labels,
    builtin_geometric_backend,
    fill_unassigned,
    filter_small_clusters,
    mask_iou,
    merge_by_obb_iou,
    nms_cluster,
    obb_iou,
    recover_unassigned,
    segment_auto,
    split_by_labels,
    unassigned_mask,
)
from meshrag.synthetic import box, make_scene, torus, uv_sphere


def cand(mask, score=0.5, prompt=0):
    return MaskCandidate(np.asarray(mask, dtype=bool), score, prompt)


def label_iou(truth, labels):
    """Best-match IoU for each true part."""
    out = []
    for p in np.unique(truth):
        g = truth == p
        out.append(max(np.sum(g & (labels == q)) / np.sum(g | (labels == q)) for q in np.unique(labels)))
    return np.array(out)


class TestTypes:
    def test_score_range(self):
        with pytest.raises(ValueError):
            cand([1, 0], score=1.5)

    def test_labels_range(self):
        with pytest.raises(ValueError):
            SegmentLabels(np.array([0, 3]), 2)

    def test_labels_json(self):
        lab = SegmentLabels(np.array([1, 2, 0]), 2)
        assert SegmentLabels.from_json(lab.to_json()).labels.tolist() == [1, 2, 0]

    def test_params_validate(self):
        with pytest.raises(ValueError):
            SegmentationParams(tau_nms=1.0)
        with pytest.raises(ValueError):
            SegmentationParams(n_prompts=0)


class TestNms:
    def test_identical_masks(self):
        m = np.arange(10) < 5
        assert nms_cluster([cand(m, 0.9), cand(m, 0.8)], 0.5) == [[0, 1]]

    def test_disjoint_masks(self):
        m = np.arange(10) < 5
        assert nms_cluster([cand(m, 0.9), cand(~m, 0.8)], 0.5) == [[0], [1]]

    def test_nested_masks_threshold(self):
        a = np.arange(10) < 10
        b = np.arange(10) < 6
        assert mask_iou(a, b) == pytest.approx(0.6)
        assert nms_cluster([cand(a, 0.9), cand(b, 0.8)], 0.5) == [[0, 1]]
        assert nms_cluster([cand(a, 0.9), cand(b, 0.8)], 0.7) == [[0], [1]]

    def test_compares_against_representative(self):
        # c overlaps b strongly but a (the representative) only weakly
        a = np.arange(12) < 6
        b = np.arange(12) < 8
        c = (np.arange(12) >= 2) & (np.arange(12) < 10)
        clusters = nms_cluster([cand(a, 0.9), cand(b, 0.8), cand(c, 0.7)], 0.5)
        assert clusters == [[0, 1], [2]]

    def test_empty(self):
        assert nms_cluster([], 0.5) == []

    @settings(max_examples=60)
    @given(st.lists(st.lists(st.booleans(), min_size=12, max_size=12), min_size=1, max_size=25),
           st.floats(0.05, 0.95))
    def test_partition(self, masks, tau):
        cands = [cand(m, 0.5) for m in masks]
        clusters = nms_cluster(cands, tau)
        flat = sorted(i for c in clusters for i in c)
        assert flat == list(range(len(cands)))


class TestFilter:
    def test_sizes(self):
        clusters = [[0], [1, 2], [3, 4, 5], [6, 7, 8, 9, 10]]
        assert [len(c) for c in filter_small_clusters(clusters)] == [3, 5]

    def test_singletons(self):
        assert filter_small_clusters([[0], [1], [2]]) == []

    def test_boundary(self):
        assert filter_small_clusters([[0, 1, 2]]) == [[0, 1, 2]]


def box_points(lo, hi, n=4000, seed=0):
    return np.random.default_rng(seed).uniform(lo, hi, (n, 3))


class TestObb:
    def test_pca_box_encloses_points(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(500, 3)) * [3, 1, 0.2]
        b = OrientedBox.from_points(pts)
        assert b.contains(pts).all()

    @pytest.mark.parametrize("shift", [0.25, 0.5, 0.75])
    def test_monte_carlo_matches_analytic(self, shift):
        a = OrientedBox(np.zeros(3), np.eye(3), np.array([0.5, 0.5, 0.5]))
        b = OrientedBox(np.array([shift, 0, 0]), np.eye(3), np.array([0.5, 0.5, 0.5]))
        exact = oracles.box_iou(-0.5 * np.ones(3), 0.5 * np.ones(3),
                                np.array([shift - 0.5, -0.5, -0.5]), np.array([shift + 0.5, 0.5, 0.5]))
        assert abs(obb_iou(a, b) - exact) <= 0.02

    def test_unequal_boxes(self):
        a = OrientedBox(np.zeros(3), np.eye(3), np.array([1.0, 0.5, 0.5]))
        b = OrientedBox(np.array([0.5, 0.2, 0]), np.eye(3), np.array([0.4, 0.4, 0.4]))
        exact = oracles.box_iou(a.center - a.half_extents, a.center + a.half_extents,
                                b.center - b.half_extents, b.center + b.half_extents)
        assert abs(obb_iou(a, b, seed=3) - exact) <= 0.02

    def _two_clusters(self, pts_a, pts_b):
        pts = np.concatenate([pts_a, pts_b])
        n = len(pts)
        ma, mb = np.arange(n) < len(pts_a), np.arange(n) >= len(pts_a)
        cands = [cand(ma, 0.9), cand(ma, 0.8), cand(ma, 0.7), cand(mb, 0.9), cand(mb, 0.8), cand(mb, 0.7)]
        return PointCloud(pts), cands, [[0, 1, 2], [3, 4, 5]]

    def test_half_overlap_merge_threshold(self):
        # slabs offset by half their length: intersection 0.5, union 1.5 (in units of one slab);
        # distinct side lengths pin the PCA axes to the coordinate axes
        size = np.array([4.0, 1.0, 0.5])
        cloud, cands, clusters = self._two_clusters(box_points(0, size), box_points([2, 0, 0], size + [2, 0, 0], seed=1))
        assert len(merge_by_obb_iou(clusters, cands, cloud, 0.30)) == 1
        assert len(merge_by_obb_iou(clusters, cands, cloud, 0.36)) == 2

    def test_same_points_merge(self):
        pts = box_points(0, 1)
        cloud, cands, clusters = self._two_clusters(pts, pts)
        assert len(merge_by_obb_iou(clusters, cands, cloud, 0.9)) == 1

    def test_disjoint_stay(self):
        cloud, cands, clusters = self._two_clusters(box_points(0, 1), box_points(3, 4, seed=1))
        assert merge_by_obb_iou(clusters, cands, cloud, 0.01) == clusters


class TestRecovery:
    def test_inside_assigned_not_reinstated(self):
        m = np.arange(10) < 5
        cands = [cand(m, 0.9), cand(m, 0.9), cand(m, 0.9), cand(np.arange(10) < 3, 0.5)]
        assert recover_unassigned([[0, 1, 2]], cands, 0.7) == [[0, 1, 2]]

    def test_unassigned_reinstated(self):
        m = np.arange(10) < 5
        cands = [cand(m, 0.9), cand(m, 0.9), cand(m, 0.9), cand(~m, 0.5)]
        assert recover_unassigned([[0, 1, 2]], cands, 0.7) == [[0, 1, 2], [3]]

    def test_sequential_update(self):
        idx = np.arange(10)
        assigned = idx < 3
        first = (idx >= 1) & (idx < 11)  # points 1..9, 7 of 9 unassigned
        second = (idx >= 3) & (idx < 10)  # fully unassigned before `first` is taken
        cands = [cand(assigned, 0.9)] * 3 + [cand(first, 0.6), cand(second, 0.5)]
        assert np.count_nonzero(first & ~assigned) / first.sum() > 0.6
        out = recover_unassigned([[0, 1, 2]], cands, 0.6)
        # second would pass against the initial u but not after first claims its points
        assert out == [[0, 1, 2], [3]]

    @settings(max_examples=60)
    @given(st.lists(st.lists(st.booleans(), min_size=15, max_size=15), min_size=2, max_size=20),
           st.integers(0, 5), st.floats(0.05, 0.95))
    def test_properties(self, masks, n_kept, tau):
        cands = [cand(m, 0.5) for m in masks]
        kept = [[i] for i in range(min(n_kept, len(cands)))]
        out = recover_unassigned(kept, cands, tau)
        assert out[: len(kept)] == kept
        before = unassigned_mask(kept, cands).mean()
        assert unassigned_mask(out, cands).mean() <= before
        # replay: each reinstated mask passed the threshold when it was evaluated
        u = unassigned_mask(kept, cands)
        for (i,) in out[len(kept):]:
            m = cands[i].mask
            assert np.count_nonzero(m & u) / m.sum() > tau
            u &= ~m


class TestAssign:
    def test_single_cluster(self):
        lab = assign_labels([[0]], [cand(np.ones(8))])
        assert lab.n_parts == 1 and lab.labels.tolist() == [1] * 8

    def test_disjoint(self):
        m = np.arange(10) < 4
        lab = assign_labels([[0], [1]], [cand(m), cand(~m)])
        assert lab.n_parts == 2
        assert set(lab.labels[m]) != set(lab.labels[~m])
        assert len(set(lab.labels[m])) == 1 and len(set(lab.labels[~m])) == 1

    def test_smaller_cluster_wins_overlap(self):
        idx = np.arange(115)
        a = idx < 100
        b = idx >= 95
        lab = assign_labels([[0], [1]], [cand(a), cand(b)]).labels
        assert np.all(lab[95:100] == lab[110])
        assert lab[0] != lab[110]

    def test_compaction_after_full_overwrite(self):
        idx = np.arange(10)
        big, small = idx < 5, idx < 5  # same area: the later one covers the earlier completely
        lab = assign_labels([[0], [1], [2]], [cand(big), cand(small), cand(idx >= 5)])
        assert lab.n_parts == 2 and sorted(set(lab.labels.tolist())) == [1, 2]

    def test_fill_unassigned_nearest(self):
        pts = np.array([[0, 0, 0], [0.1, 0, 0], [5, 0, 0], [5.1, 0, 0]], dtype=float)
        lab = fill_unassigned(SegmentLabels(np.array([1, 0, 2, 0]), 2), PointCloud(pts))
        assert lab.labels.tolist() == [1, 1, 2, 2]


def plane_cloud(z=0.0, n=20, spacing=0.05):
    g = np.arange(n) * spacing
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, z)])
    return pts, np.tile([0, 0, 1.0], (len(pts), 1))


class TestGeometricBackend:
    def test_flat_plane(self):
        pts, nrm = plane_cloud()
        masks, scores = GeometricSegmenter()(PointCloud(pts, nrm), 17)
        assert masks.shape == (3, len(pts)) and masks.all()
        np.testing.assert_allclose(scores, 1.0)

    def test_parallel_planes(self):
        p0, n0 = plane_cloud(0.0)
        p1, n1 = plane_cloud(1.0)
        cloud = PointCloud(np.concatenate([p0, p1]), np.concatenate([n0, n1]))
        masks, _ = GeometricSegmenter()(cloud, 3)
        assert np.all(masks[:, : len(p0)]) and not np.any(masks[:, len(p0):])

    def test_cube_face(self):
        cube = box()
        cloud = sample_surface(cube, 3000, seed=0)
        face = cloud.attributes["face_index"] // 2  # triangles come in pairs per side
        prompt = int(np.flatnonzero(face == 0)[0])
        masks, scores = builtin_geometric_backend(cloud, prompt)
        fine = masks[0]
        assert np.all(face[fine] == 0)
        assert np.all((scores >= 0) & (scores <= 1))

    def test_needs_normals(self):
        with pytest.raises(NoNormals):
            GeometricSegmenter()(PointCloud(np.random.default_rng(0).normal(size=(50, 3))), 0)

    def test_deterministic(self):
        cloud = make_scene(3, seed=0).cloud
        a = GeometricSegmenter()(cloud, 5)
        b = GeometricSegmenter()(cloud, 5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def spheres_scene():
    parts = [apply_transform(AffineTransform.translation([2.0 * i, 0, 0]), uv_sphere(0.5)) for i in range(3)]
    clouds = [sample_surface(p, 700, seed=i) for i, p in enumerate(parts)]
    cloud = PointCloud(np.concatenate([c.positions for c in clouds]), np.concatenate([c.normals for c in clouds]))
    return cloud, np.repeat([1, 2, 3], 700)


class TestSegmentAuto:
    def test_three_spheres(self):
        cloud, truth = spheres_scene()
        seg = segment_auto(cloud)
        assert seg.labels.n_parts == 3
        assert label_iou(truth, seg.labels.labels).min() >= 0.99
        assert sum(len(p) for p in seg.parts) == len(cloud)
        assert all(len(p) for p in seg.parts)

    def test_single_prompt_blob(self):
        cloud = sample_surface(uv_sphere(), 1500, seed=2)
        seg = segment_auto(cloud, params=SegmentationParams(n_prompts=1))
        assert seg.labels.n_parts == 1
        assert np.mean(seg.labels.labels == 1) >= 0.99

    def test_interlocking_tori(self):
        a = torus(1.0, 0.25)
        b = apply_transform(AffineTransform.translation([1.0, 0, 0]) @ AffineTransform.from_rotation(
            np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0.0]])), torus(1.0, 0.25))
        cloud = sample_surface(concatenate_meshes([a, b]), 3000, seed=0)
        seg = segment_auto(cloud)
        assert seg.labels.n_parts in (1, 2)
        assert all(len(ix) for ix in seg.indices)
        assert len(seg.labels) == len(cloud)

    def test_deterministic_and_seeded(self):
        cloud = make_scene(4, seed=3).cloud
        a = segment_auto(cloud, params=SegmentationParams(seed=1))
        b = segment_auto(cloud, params=SegmentationParams(seed=1))
        assert np.array_equal(a.labels.labels, b.labels.labels)

    def test_workers_do_not_change_result(self):
        cloud = make_scene(3, seed=4).cloud
        a = segment_auto(cloud, params=SegmentationParams(workers=1))
        b = segment_auto(cloud, params=SegmentationParams(workers=4))
        assert np.array_equal(a.labels.labels, b.labels.labels)

    def test_backend_failure_carries_prompt(self):
        def broken(cloud, prompt):
            raise RuntimeError("model crashed")

        with pytest.raises(BackendFailure) as info:
            segment_auto(spheres_scene()[0], broken)
        assert info.value.key is not None

    def test_bad_backend_shape(self):
        with pytest.raises(BackendFailure):
            segment_auto(spheres_scene()[0], lambda c, p: (np.ones((2, len(c)), bool), np.ones(2)))

    def test_empty_segmentation(self):
        def nothing(cloud, prompt):
            return np.zeros((3, len(cloud)), dtype=bool), np.full(3, 0.5)

        with pytest.raises(EmptySegmentation):
            segment_auto(spheres_scene()[0], nothing)

    def test_needs_normals(self):
        with pytest.raises(NoNormals):
            segment_auto(PointCloud(np.random.default_rng(0).normal(size=(50, 3))))

    def test_split_by_labels(self):
        cloud, truth = spheres_scene()
        parts, indices = split_by_labels(cloud, SegmentLabels(truth, 3))
        assert [len(p) for p in parts] == [700] * 3
        assert np.array_equal(parts[1].positions, cloud.positions[indices[1]])
