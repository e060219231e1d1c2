import numpy as np
import pytest

from travkit import supervision as sv
from travkit.errors import InternalConsistencyError, InvalidInputError
from travkit.scoring import ScoreEntry, ScoreSeries
from travkit.synthworld import (PatchFeatureImage, Pose, gen_world,
                                render_patch_features)


def make_image(features, origin=(0.0, 0.0), pm=1.0, t=0.0):
    h, w = features.shape[:2]
    return PatchFeatureImage(features=features, terrain_gt=np.zeros((h, w), int),
                             origin_xy=origin, patch_size_m=pm, t=t)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def series(pairs):
    return ScoreSeries([ScoreEntry(t, s) for t, s in pairs])


class TestProjectFootprints:
    def test_center_pose_hits_center_patch(self):
        world = gen_world(seed=0, n_terrains=2, size=16)
        pose = Pose(0.0, 2.0, 2.0, 0.3)
        img = render_patch_features(world, pose, seed=0, grid_hw=(8, 8), ahead_m=0.0)
        fp = sv.project_footprints([pose], series([(0.0, 0.7)]), img)
        assert fp.pixels == [(4, 4, 0.7)]

    def test_pose_outside_window_dropped(self):
        feats = np.ones((4, 4, 3))
        img = make_image(feats)
        fp = sv.project_footprints([Pose(0.0, 100.0, 100.0, 0.0)],
                                   series([(0.0, 0.5)]), img)
        assert fp.pixels == []

    def test_no_score_within_tolerance_skips(self):
        img = make_image(np.ones((4, 4, 3)))
        fp = sv.project_footprints([Pose(5.0, 1.5, 1.5, 0.0)],
                                   series([(0.0, 0.5)]), img)
        assert fp.pixels == []

    def test_straight_traverse_matches_affine_enumeration(self):
        img = make_image(np.ones((10, 10, 3)), origin=(0.0, 0.0), pm=0.5)
        poses = [Pose(0.1 * i, 0.25 + 0.45 * i, 2.3, 0.0) for i in range(10)]
        sc = series([(0.1 * i, 0.5) for i in range(10)])
        fp = sv.project_footprints(poses, sc, img)
        expected = []
        for p in poses:
            col = int(np.floor(p.x / 0.5))
            row = int(np.floor(p.y / 0.5))
            if 0 <= row < 10 and 0 <= col < 10:
                expected.append((row, col, 0.5))
        assert fp.pixels == expected
        rows = {px[0] for px in fp.pixels}
        assert len(rows) == 1  # axis-aligned traverse stays on one grid row

    def test_nearest_score_is_used(self):
        img = make_image(np.ones((4, 4, 3)))
        sc = series([(0.0, 0.1), (0.4, 0.9)])
        fp = sv.project_footprints([Pose(0.3, 1.5, 1.5, 0.0)], sc, img)
        assert fp.pixels[0][2] == pytest.approx(0.9)


class TestSegmentTerrain:
    def test_identical_patches_one_segment(self):
        feats = np.tile(unit([1.0, 2.0, 3.0]), (5, 5, 1))
        img = make_image(feats)
        fp = sv.Footprint(pixels=[(2, 2, 0.5)], source_times=[0.0])
        mask = sv.segment_terrain(img, fp, c=0.95)
        assert np.all(mask.segments == 1)

    def test_orthogonal_regions_two_segments(self):
        a, b = unit([1.0, 0.0, 0.0]), unit([0.0, 1.0, 0.0])
        feats = np.empty((4, 6, 3))
        feats[:, :3] = a
        feats[:, 3:] = b
        img = make_image(feats)
        fp = sv.Footprint(pixels=[(1, 1, 0.2), (2, 4, 0.8)], source_times=[0.0, 0.1])
        mask = sv.segment_terrain(img, fp, c=0.95)
        assert set(np.unique(mask.segments)) == {1, 2}
        assert len(np.unique(mask.segments[:, :3])) == 1
        assert len(np.unique(mask.segments[:, 3:])) == 1
        assert mask.segments[1, 1] != mask.segments[2, 4]

    def test_noisy_single_terrain_coverage(self):
        world = gen_world(seed=1, n_terrains=2, size=32)
        r, c = np.argwhere(world.cells == 0)[0]
        pose = Pose(0.0, (c + 0.5) * world.resolution, (r + 0.5) * world.resolution, 0.0)
        img = render_patch_features(world, pose, seed=5, grid_hw=(12, 12),
                                    noise_std=0.05, ahead_m=0.0)
        # restrict to a synthetic single-terrain view
        proto_gt = img.terrain_gt[6, 6]
        feats = img.features.copy()
        feats[img.terrain_gt != proto_gt] = feats[6, 6]
        single = make_image(feats)
        fp = sv.Footprint(pixels=[(6, 6, 0.9)], source_times=[0.0])
        mask = sv.segment_terrain(single, fp, c=0.95)
        assert (mask.segments == 1).mean() >= 0.95

    def test_overlapping_growths_merge(self):
        feats = np.tile(unit([1.0, 1.0, 0.0]), (4, 4, 1))
        img = make_image(feats)
        fp = sv.Footprint(pixels=[(0, 0, 0.3), (3, 3, 0.7)], source_times=[0.0, 0.1])
        mask = sv.segment_terrain(img, fp, c=0.9)
        assert set(np.unique(mask.segments)) == {1}

    def test_raising_threshold_shrinks_segments(self):
        rng = np.random.default_rng(3)
        base = unit(rng.normal(size=8))
        feats = base + rng.normal(scale=0.15, size=(8, 8, 8))
        feats /= np.linalg.norm(feats, axis=2, keepdims=True)
        img = make_image(feats)
        fp = sv.Footprint(pixels=[(4, 4, 0.5)], source_times=[0.0])
        lo = sv.segment_terrain(img, fp, c=0.80).segments > 0
        hi = sv.segment_terrain(img, fp, c=0.95).segments > 0
        assert np.all(hi <= lo)

    def test_threshold_domain(self):
        img = make_image(np.ones((2, 2, 2)))
        fp = sv.Footprint(pixels=[(0, 0, 0.1)], source_times=[0.0])
        with pytest.raises(InvalidInputError):
            sv.segment_terrain(img, fp, c=1.5)


class TestBuildSupervision:
    def test_segment_mean(self):
        segments = np.ones((3, 3), dtype=np.int32)
        fp = sv.Footprint(pixels=[(0, 0, 0.2), (1, 1, 0.4)], source_times=[0, 1])
        out = sv.build_supervision(fp, sv.TerrainMask(segments))
        np.testing.assert_allclose(out.values, 0.3)
        assert out.valid.all()

    def test_single_pixel_broadcast(self):
        segments = np.zeros((3, 3), dtype=np.int32)
        segments[:2, :2] = 1
        fp = sv.Footprint(pixels=[(0, 1, 0.75)], source_times=[0])
        out = sv.build_supervision(fp, sv.TerrainMask(segments))
        assert np.all(out.values[:2, :2] == 0.75)
        assert not out.valid[2, 2]
        assert out.values[2, 2] == 0.0

    def test_no_bleed_between_segments(self):
        segments = np.zeros((4, 4), dtype=np.int32)
        segments[:, :2] = 1
        segments[:, 2:] = 2
        fp = sv.Footprint(pixels=[(0, 0, 0.1), (0, 3, 0.9)], source_times=[0, 1])
        out = sv.build_supervision(fp, sv.TerrainMask(segments))
        assert np.all(out.values[:, :2] == 0.1)
        assert np.all(out.values[:, 2:] == 0.9)

    def test_footprint_outside_segment_is_error(self):
        segments = np.zeros((2, 2), dtype=np.int32)
        fp = sv.Footprint(pixels=[(0, 0, 0.5)], source_times=[0])
        with pytest.raises(InternalConsistencyError):
            sv.build_supervision(fp, sv.TerrainMask(segments))

    def test_values_are_convex_combinations(self):
        rng = np.random.default_rng(4)
        segments = np.ones((5, 5), dtype=np.int32)
        scores = rng.uniform(size=6)
        fp = sv.Footprint(pixels=[(i, i % 5, s) for i, s in enumerate(scores[:5])]
                          + [(0, 1, scores[5])],
                          source_times=list(range(6)))
        out = sv.build_supervision(fp, sv.TerrainMask(segments))
        got = out.values[out.valid]
        assert np.all(got >= scores.min() - 1e-12)
        assert np.all(got <= scores.max() + 1e-12)

    def test_deterministic(self):
        segments = np.ones((3, 3), dtype=np.int32)
        fp = sv.Footprint(pixels=[(0, 0, 0.2), (2, 2, 0.6)], source_times=[0, 1])
        a = sv.build_supervision(fp, sv.TerrainMask(segments))
        b = sv.build_supervision(fp, sv.TerrainMask(segments))
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.valid, b.valid)


def test_supervision_roundtrip(tmp_path):
    mask = sv.SupervisionMask(values=np.array([[0.25, 0.0], [1.0, 0.5]]),
                              valid=np.array([[True, False], [True, True]]))
    sv.save_supervision(tmp_path, "img0", mask)
    loaded = sv.load_supervision(tmp_path, "img0")
    np.testing.assert_allclose(loaded.values, mask.values)
    np.testing.assert_array_equal(loaded.valid, mask.valid)
