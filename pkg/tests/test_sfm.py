import logging

import numpy as np
import pytest

from loopsplat import harness
from loopsplat.core import CameraPose, logit
from loopsplat.sfm import (ColmapDirProvider, SfmCamera, SfmImage, SfmModel, SfmPoint3D,
                           SfmView, filter_match_error, filter_pseudo_only,
                           init_gaussians_from_points, parse_colmap_text, project_sparse_depth,
                           validate_model, write_colmap_text)


class TestParser:
    def test_fixture_counts_and_values(self, fixtures_dir):
        m = parse_colmap_text(fixtures_dir / "colmap_min")
        assert (len(m.cameras), len(m.images), len(m.points)) == (1, 2, 3)
        cam = m.cameras[1]
        assert (cam.model, cam.width, cam.height, cam.params) == ("PINHOLE", 64, 48,
                                                                  (50.0, 50.0, 32.0, 24.0))
        b = m.images[2]
        assert b.name == "frame_b.png" and b.camera_id == 1
        np.testing.assert_array_equal(b.tvec, [-1, 0, 0])
        np.testing.assert_array_equal(b.pose.center, [1, 0, 0])
        np.testing.assert_array_equal(b.point3d_ids, [1, 2, 3, -1])
        assert b.xys[2, 0] == 8.666666666666668
        p = m.points[2]
        np.testing.assert_array_equal(p.xyz, [0.5, 0.2, 5.0])
        assert p.rgb == (10, 200, 10) and p.reproj_error == 0.125
        assert p.track == [(1, 1), (2, 1)]
        assert m.training_image_ids == {1, 2} and not m.pseudo_image_ids

    def test_keypoints_match_projection(self, fixtures_dir):
        m = parse_colmap_text(fixtures_dir / "colmap_min")
        for p in m.points.values():
            for iid, kp in p.track:
                cam = m.camera_for(iid)
                k = cam.intrinsics
                x = cam.pose.rotmat @ (p.xyz - cam.pose.center)
                uv = [k.fx * x[0] / x[2] + k.cx, k.fy * x[1] / x[2] + k.cy]
                np.testing.assert_allclose(m.images[iid].xys[kp], uv, atol=1e-9)

    def test_round_trip(self, fixtures_dir, tmp_path):
        a = parse_colmap_text(fixtures_dir / "colmap_min")
        write_colmap_text(a, tmp_path)
        b = parse_colmap_text(tmp_path)
        assert a == b
        write_colmap_text(b, tmp_path / "again")
        for f in ("cameras.txt", "images.txt", "points3D.txt"):
            assert (tmp_path / f).read_text() == (tmp_path / "again" / f).read_text()

    def test_empty_points(self, fixtures_dir, tmp_path):
        (tmp_path / "cameras.txt").write_text((fixtures_dir / "colmap_min" / "cameras.txt")
                                              .read_text())
        (tmp_path / "images.txt").write_text(
            "1 1 0 0 0 0 0 0 1 a.png\n\n2 1 0 0 0 -1 0 0 1 b.png\n\n")
        (tmp_path / "points3D.txt").write_text("# POINT3D_ID, X, Y, Z, R, G, B, ERROR\n")
        m = parse_colmap_text(tmp_path)
        assert len(m.points) == 0 and len(m.images) == 2
        assert len(m.images[1].xys) == 0

    def test_simple_pinhole(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("3 SIMPLE_PINHOLE 100 80 100 50 40\n")
        (tmp_path / "images.txt").write_text("")
        (tmp_path / "points3D.txt").write_text("")
        k = parse_colmap_text(tmp_path).cameras[3].intrinsics
        assert (k.fx, k.fy, k.cx, k.cy) == (100, 100, 50, 40)

    def test_unknown_model(self, tmp_path):
        (tmp_path / "cameras.txt").write_text("1 OPENCV 10 10 1 1 5 5 0 0 0 0\n")
        with pytest.raises(ValueError, match="unsupported camera model OPENCV"):
            parse_colmap_text(tmp_path)

    def test_malformed_line_reports_line_number(self, fixtures_dir, tmp_path):
        for f in ("cameras.txt", "images.txt"):
            (tmp_path / f).write_text((fixtures_dir / "colmap_min" / f).read_text())
        (tmp_path / "points3D.txt").write_text("# header\n1 0 0 4 1 2 3 0.0 1 0 2 0\n"
                                               "2 0.5 nope 5 1 2 3 0.1 1 1\n")
        with pytest.raises(ValueError, match=r"points3D.txt:3"):
            parse_colmap_text(tmp_path)

    def test_pseudo_labels(self, fixtures_dir):
        m = parse_colmap_text(fixtures_dir / "colmap_filters")
        assert m.pseudo_image_ids == {3, 4} and m.training_image_ids == {1, 2}
        m = parse_colmap_text(fixtures_dir / "colmap_filters", pseudo_names=["train_b.png"])
        assert m.pseudo_image_ids == {2}


class TestFilters:
    @pytest.fixture
    def model(self, fixtures_dir):
        return parse_colmap_text(fixtures_dir / "colmap_filters")

    def test_match_error_threshold(self, model):
        flags = filter_match_error(model)
        assert flags == {1: True, 2: False, 3: True, 4: True}
        assert set(model.points) == {1, 2, 3, 4}

    @pytest.mark.parametrize("err,ok", [(1.3, True), (2.5, False), (2.0, False), (-1.0, False),
                                        (0.0, True)])
    def test_match_error_values(self, err, ok):
        m = SfmModel(points={1: SfmPoint3D(1, np.zeros(3), (0, 0, 0), err, [(1, 0)])})
        assert filter_match_error(m)[1] is ok

    def test_pseudo_only_removed(self, model):
        f = filter_pseudo_only(model)
        assert set(f.points) == {1, 2, 4}
        assert 3 not in f.images[3].point3d_ids and 3 not in f.images[4].point3d_ids
        assert list(f.images[3].point3d_ids) == [-1, 4]
        validate_model(f)
        # the input is untouched
        assert 3 in model.points

    def test_filters_commute(self, model):
        a = filter_match_error(filter_pseudo_only(model))
        kept = filter_pseudo_only(model).points
        b = {k: v for k, v in filter_match_error(model).items() if k in kept}
        assert a == b

    def test_sparse_depth_maps(self, model):
        f = filter_pseudo_only(model)
        flags = filter_match_error(f)
        d1 = project_sparse_depth(f, 1, flags)
        d2 = project_sparse_depth(f, 2, flags)
        d3 = project_sparse_depth(f, 3, flags)
        d4 = project_sparse_depth(f, 4, flags)
        assert {tuple(p) for p in np.argwhere(d1)} == {(24, 32), (19, 35)}
        assert d1[24, 32] == 4.0 and d1[19, 35] == 4.0
        # point 2 (error 2.5) is absent; point 4 projects into view 2 but is untracked there
        assert {tuple(p) for p in np.argwhere(d2)} == {(24, 20)}
        assert d2[19, 22] == 0.0
        assert {tuple(p) for p in np.argwhere(d3)} == {(19, 28)}
        assert not d4.any()

    def test_geometric_projection_without_tracks(self, model):
        d2 = project_sparse_depth(model, 2, use_tracks=False)
        assert d2[19, 22] == 4.0  # point 4
        assert d2[24, 18] == 5.0  # point 3

    def test_rounding_and_zbuffer(self):
        cam = SfmCamera(1, "PINHOLE", 32, 32, (10.0, 10.0, 0.0, 0.0))
        pose = CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))
        xy = np.array([[10.2, 20.7], [3.0, 3.0], [3.4, 2.6]])
        im = SfmImage.from_pose(1, "a", 1, pose, xy, np.array([1, 2, 3]))
        pts = {1: SfmPoint3D(1, np.array([0, 0, 3.5]), (0, 0, 0), 0.1, [(1, 0)]),
               2: SfmPoint3D(2, np.array([0, 0, 5.0]), (0, 0, 0), 0.1, [(1, 1)]),
               3: SfmPoint3D(3, np.array([0, 0, 2.0]), (0, 0, 0), 0.1, [(1, 2)])}
        m = validate_model(SfmModel({1: cam}, {1: im}, pts, {1}, set()))
        d = project_sparse_depth(m, 1)
        assert d[21, 10] == 3.5
        assert d[3, 3] == 2.0
        assert np.count_nonzero(d) == 2

    def test_behind_camera_warns(self, caplog):
        cam = SfmCamera(1, "PINHOLE", 8, 8, (10.0, 10.0, 4.0, 4.0))
        pose = CameraPose(np.array([1.0, 0, 0, 0]), np.zeros(3))
        im = SfmImage.from_pose(1, "a", 1, pose, np.array([[4.0, 4.0]]), np.array([1]))
        pts = {1: SfmPoint3D(1, np.array([0, 0, -2.0]), (0, 0, 0), 0.1, [(1, 0)])}
        m = SfmModel({1: cam}, {1: im}, pts, {1}, set())
        with caplog.at_level(logging.WARNING):
            assert not project_sparse_depth(m, 1).any()
        assert "behind the camera" in caplog.text


class TestInit:
    def pts(self, xyz):
        return [SfmPoint3D(i + 1, np.array(p, float), (255, 0, 51), 0.1, [(1, 0)])
                for i, p in enumerate(xyz)]

    def test_tetrahedron(self):
        s = 1 / np.sqrt(2)
        tet = np.array([[1, 0, -s], [-1, 0, -s], [0, 1, s], [0, -1, s]]) / 2
        c = init_gaussians_from_points(self.pts(tet))
        np.testing.assert_allclose(c.raw_scale, 0.0, atol=1e-12)
        np.testing.assert_allclose(c.raw_opacity, logit(0.1))
        np.testing.assert_array_equal(c.rotation_q, np.tile([1, 0, 0, 0], (4, 1)))
        np.testing.assert_allclose(c.color[0], [1, 0, 0.2])

    def test_single_point(self):
        c = init_gaussians_from_points(self.pts([[1, 2, 3]]))
        np.testing.assert_allclose(c.raw_scale, np.log(0.1))

    def test_two_points(self):
        c = init_gaussians_from_points(self.pts([[0, 0, 0], [2, 0, 0]]))
        np.testing.assert_allclose(c.raw_scale, np.log(2.0))

    def test_empty(self):
        with pytest.raises(ValueError):
            init_gaussians_from_points([])


class TestProviders:
    def test_colmap_dir_pass_through(self, fixtures_dir):
        assert ColmapDirProvider(fixtures_dir / "colmap_min").run() == \
            parse_colmap_text(fixtures_dir / "colmap_min")

    def test_colmap_dir_filters_by_name(self, fixtures_dir):
        m = parse_colmap_text(fixtures_dir / "colmap_filters")
        views = [SfmView("train_a.png", m.camera_for(1)), SfmView("pseudo_c.png", m.camera_for(3),
                                                                  True)]
        sub = ColmapDirProvider(fixtures_dir / "colmap_filters").run(views)
        assert set(sub.images) == {1, 3} and sub.pseudo_image_ids == {3}
        assert set(sub.points) == {1, 2, 3, 4}
        assert sub.points[1].track == [(1, 0)]

    def test_synthetic_reprojection(self):
        scene = harness.gen_scene("blob_field", 20, seed=3)
        cams = harness.gen_rig(n_views=2)
        m = harness.synthetic_sfm(scene, [SfmView(c.name, c) for c in cams], noise_px=0.1,
                                  seed=1)
        assert len(m.points) > 10
        for p in m.points.values():
            for iid, kp in p.track:
                cam = m.camera_for(iid)
                k = cam.intrinsics
                x = cam.pose.rotmat @ (p.xyz - cam.pose.center)
                uv = np.array([k.fx * x[0] / x[2] + k.cx, k.fy * x[1] / x[2] + k.cy])
                assert np.linalg.norm(m.images[iid].xys[kp] - uv) < 0.5

    def test_empty_track_rejected(self):
        m = SfmModel(points={1: SfmPoint3D(1, np.zeros(3), (0, 0, 0), 0.0, [])})
        with pytest.raises(ValueError, match="empty track"):
            validate_model(m)
