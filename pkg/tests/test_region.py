import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tranet import numcore as nc
from tranet.region import (
    AUGrouping,
    LandmarkSet,
    Region,
    apply_hard_mask,
    estimate_similarity,
    feature_center_row,
    make_hard_masks,
    mask_batch,
    read_landmarks,
    similarity_align,
    write_landmarks,
)
from tranet.verify import oracles


def face_landmarks(rng, size=64):
    pts = rng.uniform(8, size - 8, size=(66, 2))
    pts[28] = (size / 2, size / 2)
    pts[8] = (size / 2, size * 15 / 16)
    return pts


class TestAlignment:
    def test_identity_when_anchors_on_target(self, rng):
        img = rng.uniform(size=(3, 64, 64))
        lm = LandmarkSet(face_landmarks(rng))
        out, lm2 = similarity_align(img, lm, 64)
        np.testing.assert_array_equal(out, img)
        np.testing.assert_array_equal(lm2.points, lm.points)

    def test_rotated_input(self, rng):
        size = 64
        img = rng.uniform(size=(1, size, size))
        pts = face_landmarks(rng, size)
        # rotate 90 degrees counter-clockwise about the pixel-grid centre
        rot_img = np.rot90(img, k=1, axes=(1, 2)).copy()
        c = (size - 1) / 2
        rot_pts = np.stack([pts[:, 1], 2 * c - pts[:, 0]], axis=1)
        out, lm = similarity_align(rot_img, LandmarkSet(rot_pts), size)
        np.testing.assert_allclose(lm.nose_mid, [32, 32], atol=0.5)
        np.testing.assert_allclose(lm.jaw_bottom, [32, 60], atol=0.5)
        d_in = np.linalg.norm(rot_pts[:, None] - rot_pts[None], axis=-1)
        d_out = np.linalg.norm(lm.points[:, None] - lm.points[None], axis=-1)
        off = ~np.eye(66, dtype=bool)
        ratios = d_out[off] / d_in[off]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)
        # undoing the rotation recovers the original image up to interpolation at the zero-filled border
        np.testing.assert_allclose(out[:, 2:-2, 2:-2], img[:, 2:-2, 2:-2], atol=1e-9)

    def test_double_scale(self, rng):
        pts = face_landmarks(rng) * 2
        src = np.stack([pts[28], pts[8]])
        t = estimate_similarity(src, np.array([[32.0, 32.0], [32.0, 60.0]]))
        assert abs(t.scale - 0.5) < 1e-6
        scale, angle, tx, ty = oracles.similarity_from_two_points(src, [[32.0, 32.0], [32.0, 60.0]])
        assert abs(t.scale - scale) < 1e-12
        assert abs(t.angle - angle) < 1e-12
        assert abs(t.b - complex(tx, ty)) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_two_point_oracle(self, seed):
        r = np.random.default_rng(seed)
        src = r.uniform(0, 200, size=(2, 2))
        dst = r.uniform(0, 200, size=(2, 2))
        if np.linalg.norm(src[0] - src[1]) < 1 or np.linalg.norm(dst[0] - dst[1]) < 1:
            return
        t = estimate_similarity(src, dst)
        scale, angle, tx, ty = oracles.similarity_from_two_points(src, dst)
        assert math.isclose(t.scale, scale, rel_tol=1e-9)
        assert abs(math.remainder(t.angle - angle, 2 * math.pi)) < 1e-9
        np.testing.assert_allclose(t.apply(src), dst, atol=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_angles_preserved(self, seed):
        r = np.random.default_rng(seed)
        pts = r.uniform(0, 100, size=(66, 2))
        if np.linalg.norm(pts[28] - pts[8]) < 5:
            return
        _, lm = similarity_align(np.zeros((1, 4, 4)), LandmarkSet(pts), 64)

        def angle(p, i, j, k):
            u, v = p[i] - p[j], p[k] - p[j]
            return math.atan2(u[0] * v[1] - u[1] * v[0], u @ v)

        for i, j, k in r.integers(0, 66, size=(20, 3)):
            if len({i, j, k}) < 3 or min(np.linalg.norm(pts[i] - pts[j]), np.linalg.norm(pts[k] - pts[j])) < 1e-3:
                continue
            assert abs(angle(pts, i, j, k) - angle(lm.points, i, j, k)) < 1e-4

    def test_coincident_anchors_rejected(self, rng):
        pts = face_landmarks(rng)
        pts[8] = pts[28]
        with pytest.raises(ValueError, match="degenerate"):
            similarity_align(np.zeros((1, 8, 8)), LandmarkSet(pts), 64)

    def test_landmark_count_enforced(self):
        with pytest.raises(ValueError, match="66"):
            LandmarkSet(np.zeros((68, 2)))


class TestHardMasks:
    def test_worked_example(self):
        up, mid, low = make_hard_masks(8, 4, 4)
        assert up.rows.tolist() == [0, 1, 2, 3]
        assert low.rows.tolist() == [4, 5, 6, 7]
        assert mid.rows.tolist() == [2, 3, 4, 5]
        assert up.grid.shape == (8, 4)

    def test_symmetric_center(self):
        for h in range(4, 33, 4):
            up, _, low = make_hard_masks(h, 3, h // 2)
            assert len(up.rows) == len(low.rows) == h // 2

    def test_exhaustive_algebra(self):
        rng = np.random.default_rng(0)
        for h in range(4, 33, 4):
            for y in range(1, h):
                masks = make_hard_masks(h, 5, y)
                up, mid, low = (m.grid for m in masks)
                for g in (up, mid, low):
                    assert set(np.unique(g)) <= {0, 1}
                    rows = g[:, 0]
                    assert np.all(g == rows[:, None])
                    on = np.flatnonzero(rows)
                    assert on.size == 0 or np.all(np.diff(on) == 1)
                assert not np.any(up & low)
                assert np.all(up | low)
                if y - h // 4 >= 0 and y + h // 4 <= h:
                    assert mid[:, 0].sum() == h // 2
                feat = nc.Tensor(rng.normal(size=(2, 3, h, 5)))
                other = nc.Tensor(rng.normal(size=(2, 3, h, 5)))
                for m in masks:
                    once = apply_hard_mask(m, feat)
                    assert once.data.tobytes() == apply_hard_mask(m, once).data.tobytes()
                    lhs = apply_hard_mask(m, nc.add(feat, other)).data
                    rhs = apply_hard_mask(m, feat).data + apply_hard_mask(m, other).data
                    np.testing.assert_array_equal(lhs, rhs)

    def test_apply_identity_and_zero_rows(self, rng):
        feat = rng.normal(size=(2, 3, 8, 6))
        ones = make_hard_masks(8, 6, 4)[0]
        ones.grid[...] = 1
        np.testing.assert_array_equal(apply_hard_mask(ones, nc.Tensor(feat)).data, feat)
        up = make_hard_masks(8, 6, 3)[0]
        out = apply_hard_mask(up, nc.Tensor(feat)).data
        assert not out[:, :, 3:].any()
        np.testing.assert_array_equal(out[:, :, :3], feat[:, :, :3])

    def test_resolution_mismatch(self, rng):
        with pytest.raises(nc.ShapeError):
            apply_hard_mask(make_hard_masks(8, 8, 4)[0], nc.Tensor(np.ones((1, 1, 16, 16))))

    @pytest.mark.parametrize("h,y", [(8, 0), (8, 8), (8, -1), (10, 5)])
    def test_invalid_geometry(self, h, y):
        with pytest.raises(ValueError):
            make_hard_masks(h, 4, y)

    def test_batch_masks(self):
        m = mask_batch(Region.MIDDLE, 8, 2, [4, 2])
        assert m.shape == (2, 1, 8, 2)
        assert np.flatnonzero(m[0, 0, :, 0]).tolist() == [2, 3, 4, 5]
        assert np.flatnonzero(m[1, 0, :, 0]).tolist() == [0, 1, 2, 3]


class TestCenterRow:
    def _lm(self, row):
        pts = np.zeros((66, 2))
        pts[28] = (112, row)
        pts[8] = (112, 210)
        return LandmarkSet(pts)

    def test_exact_scaling(self):
        assert feature_center_row(self._lm(112), 28, 224) == 14

    def test_clamped(self):
        assert feature_center_row(self._lm(0), 28, 224) == 1
        assert feature_center_row(self._lm(224), 28, 224) == 27

    @pytest.mark.parametrize("jitter", [-3, -2, -1, 0, 1, 2, 3])
    def test_rounding_absorbs_jitter(self, jitter):
        # oracle: |jitter| <= 3 < stride/2 = 4 keeps round((112 + j)/8) at 14
        assert feature_center_row(self._lm(112 + jitter), 28, 224) == 14


def test_grouping():
    g = AUGrouping()
    assert g.all_aus == (1, 2, 4, 6, 9, 12, 25, 26)
    assert g.columns("lower") == [5, 6, 7]
    with pytest.raises(ValueError):
        AUGrouping(upper=(1, 2), middle=(2,), lower=(3,))


def test_landmark_file_round_trip(tmp_path, rng):
    table = {"s1_f0": rng.normal(size=(66, 2)), "s2_f9": rng.normal(size=(66, 2))}
    path = tmp_path / "lm.txt"
    write_landmarks(path, table)
    line = path.read_text().splitlines()[0].split()
    assert line[0] == "s1_f0" and len(line) == 133
    back = read_landmarks(path)
    for k in table:
        np.testing.assert_array_equal(back[k], table[k])
