import json
import warnings

import numpy as np
import pytest

from handrig.camera_geometry import (
    BehindCameraError,
    CameraIntrinsics,
    CameraModel,
    InsufficientViewsError,
    MarkerDetection,
    MarkerLookupError,
    NoConsensusError,
    Pose6D,
    RansacConfig,
    UnstableEstimateError,
    default_cube_spec,
    estimate_marker_pose,
    look_at_camera,
    project,
    project_many,
    ransac_pose_consensus,
    triangulate,
)
from handrig.jsonio import canonical_dumps
from handrig.rotations import rotation_angle_between


@pytest.fixture(scope="module")
def intr():
    return CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=320.0, width=640, height=640)


@pytest.fixture(scope="module")
def rig(intr):
    return [
        look_at_camera([0, -400, 300], [0, 0, 0], intr),
        look_at_camera([300, -300, 350], [0, 0, 0], intr),
        look_at_camera([-300, -250, 320], [0, 0, 0], intr),
    ]


@pytest.fixture(scope="module")
def cube():
    return default_cube_spec()


def project_marker(marker, pose, intr):
    pc = marker.corners @ pose.matrix().T + pose.translation
    return np.column_stack(
        [intr.fx * pc[:, 0] / pc[:, 2] + intr.cx, intr.fy * pc[:, 1] / pc[:, 2] + intr.cy]
    )


class TestPose6D:
    def test_canonical_angle_range(self):
        rv = np.array([0.0, 0.0, 3.5])     # > pi, wraps to 3.5 - 2pi
        p = Pose6D(rv, np.zeros(3))
        assert np.linalg.norm(p.rotvec) <= np.pi
        np.testing.assert_allclose(
            p.matrix(), Pose6D(rv * (3.5 - 2 * np.pi) / 3.5, np.zeros(3)).matrix(), atol=1e-12
        )

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = Pose6D(rng.uniform(-2, 2, 3), rng.uniform(-100, 100, 3))
            ident = p.compose(p.inverse())
            np.testing.assert_allclose(ident.matrix(), np.eye(3), atol=1e-10)
            np.testing.assert_allclose(ident.translation, 0.0, atol=1e-9)

    def test_apply_matches_matrix_form(self):
        rng = np.random.default_rng(1)
        p = Pose6D(rng.uniform(-1, 1, 3), rng.uniform(-10, 10, 3))
        pts = rng.uniform(-5, 5, (7, 3))
        expected = pts @ p.matrix().T + p.translation
        np.testing.assert_allclose(p.apply(pts), expected, atol=1e-12)
        np.testing.assert_allclose(p.apply(pts[0]), expected[0], atol=1e-12)


class TestProjection:
    def test_principal_point_identity(self, intr):
        cam = CameraModel(intr, Pose6D.identity())
        for z in (10.0, 400.0, 5000.0):
            np.testing.assert_allclose(project(cam, [0, 0, z]), [intr.cx, intr.cy])

    def test_pinhole_formula(self, intr):
        cam = CameraModel(intr, Pose6D.identity())
        np.testing.assert_allclose(project(cam, [1.0, 0.0, 500.0]), [321.0, 320.0])

    def test_behind_camera_raises(self, intr):
        cam = CameraModel(intr, Pose6D.identity())
        with pytest.raises(BehindCameraError):
            project(cam, [0.0, 0.0, -5.0])
        with pytest.raises(BehindCameraError):
            project(cam, [0.0, 0.0, 0.0])

    def test_rigid_invariance(self, intr, rig):
        # Transforming world frame and compensating the extrinsic leaves pixels fixed.
        rng = np.random.default_rng(2)
        T = Pose6D(rng.uniform(-1, 1, 3), rng.uniform(-50, 50, 3))
        pt = np.array([20.0, -10.0, 15.0])
        for cam in rig:
            moved = CameraModel(cam.intrinsics, cam.world_to_cam.compose(T.inverse()))
            np.testing.assert_allclose(
                project(cam, pt), project(moved, T.apply(pt)), atol=1e-9
            )

    def test_project_many_matches_scalar(self, rig):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-40, 40, (10, 3))
        for cam in rig:
            uv, z = project_many(cam, pts)
            assert np.all(z > 0)
            for i in range(len(pts)):
                np.testing.assert_allclose(uv[i], project(cam, pts[i]), atol=1e-12)


class TestTriangulate:
    def test_roundtrip_three_views(self, rig):
        rng = np.random.default_rng(4)
        for _ in range(25):
            X = rng.uniform(-60, 60, 3)
            obs = [project(c, X) for c in rig]
            res = triangulate(obs, rig)
            assert not res.ill_conditioned
            np.testing.assert_allclose(res.point, X, atol=1e-6)

    def test_fit_roundtrip_through_projection(self, rig):
        # project -> triangulate recovers the original within 1e-6 mm
        X = np.array([11.0, 22.0, -9.0])
        obs = [project(c, X) for c in rig]
        res = triangulate(obs[:2], rig[:2])
        assert np.linalg.norm(res.point - X) < 1e-6

    def test_zero_baseline_flagged(self, rig):
        X = np.array([5.0, 6.0, 7.0])
        obs = project(rig[0], X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = triangulate([obs, obs], [rig[0], rig[0]])
        assert res.ill_conditioned

    def test_single_view_raises(self, rig):
        with pytest.raises(InsufficientViewsError):
            triangulate([np.array([320.0, 320.0])], [rig[0]])


class TestMarkerPose:
    GT = Pose6D(np.array([0.4, -0.3, 0.2]), np.array([-20.0, 10.0, 400.0]))

    def test_exact_recovery(self, cube, intr):
        for marker in cube.markers[:8]:
            det = MarkerDetection(marker.marker_id, project_marker(marker, self.GT, intr))
            est = estimate_marker_pose(det, cube, intr)
            assert rotation_angle_between(est.pose.matrix(), self.GT.matrix()) < 1e-6
            assert np.linalg.norm(est.pose.translation - self.GT.translation) < 1e-4
            assert est.rms_px < 1e-6

    def test_corner_order_disambiguates_square_symmetry(self, cube, intr):
        marker = cube.markers[0]
        corners = project_marker(marker, self.GT, intr)
        est = estimate_marker_pose(MarkerDetection(marker.marker_id, corners), cube, intr)
        rolled = np.roll(corners, 1, axis=0)     # same square, shifted ordering
        est_rolled = estimate_marker_pose(MarkerDetection(marker.marker_id, rolled), cube, intr)
        angle = rotation_angle_between(est.pose.matrix(), est_rolled.pose.matrix())
        assert angle > np.pi / 4                  # a genuinely different pose

    def test_noise_keeps_rms_bounded(self, cube, intr):
        marker = cube.markers[5]
        clean = project_marker(marker, self.GT, intr)
        rms_values = []
        for seed in range(100):
            rng = np.random.default_rng(seed)
            det = MarkerDetection(marker.marker_id, clean + rng.normal(0, 0.5, (4, 2)))
            rms_values.append(estimate_marker_pose(det, cube, intr).rms_px)
        rms_values = np.asarray(rms_values)
        assert np.all(rms_values <= 1.5)
        assert np.median(rms_values) < 0.75

    def test_unknown_id_raises_lookup(self, cube, intr):
        det = MarkerDetection(999, np.array([[0, 0], [10, 0], [10, 10], [0, 10.0]]))
        with pytest.raises(MarkerLookupError):
            estimate_marker_pose(det, cube, intr)

    def test_collinear_corners_raise(self, cube, intr):
        det = MarkerDetection(0, np.array([[0, 0], [10, 0], [20, 0], [0, 10.0]]))
        with pytest.raises(UnstableEstimateError):
            estimate_marker_pose(det, cube, intr)


def _hypotheses(cube, intr, pose, corrupt_ids=(), rng=None):
    hyps = []
    for marker in cube.markers:
        corners = project_marker(marker, pose, intr)
        if marker.marker_id in corrupt_ids:
            ang = rng.uniform(0.5, 2 * np.pi - 0.5)
            R2 = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
            center = corners.mean(axis=0)
            corners = (corners - center) @ R2.T * rng.uniform(0.6, 1.8) + center
            corners = corners + rng.uniform(80, 300, 2) * rng.choice([-1.0, 1.0], 2)
        hyps.append(estimate_marker_pose(MarkerDetection(marker.marker_id, corners), cube, intr))
    return hyps


class TestRansacConsensus:
    GT = Pose6D(np.array([0.3, -0.5, 0.1]), np.array([10.0, -15.0, 450.0]))

    def test_unanimous_hypotheses(self, cube, intr):
        hyps = _hypotheses(cube, intr, self.GT)
        res = ransac_pose_consensus(hyps, cube, intr, RansacConfig(), np.random.default_rng(0))
        assert len(res.inlier_indices) == 24
        assert rotation_angle_between(res.pose.matrix(), self.GT.matrix()) < 1e-6
        assert np.linalg.norm(res.pose.translation - self.GT.translation) < 1e-4

    def test_corrupted_minority_excluded(self, cube, intr):
        rng = np.random.default_rng(42)
        corrupt = (3, 9, 15, 21)
        hyps = _hypotheses(cube, intr, self.GT, corrupt, rng)
        res = ransac_pose_consensus(hyps, cube, intr, RansacConfig(), rng)
        assert sorted(res.inlier_ids) == [i for i in range(24) if i not in corrupt]
        assert rotation_angle_between(res.pose.matrix(), self.GT.matrix()) < 1e-6
        assert np.linalg.norm(res.pose.translation - self.GT.translation) < 1e-4

    def test_all_inconsistent_raises_no_consensus(self, cube, intr):
        rng = np.random.default_rng(7)
        hyps = _hypotheses(cube, intr, self.GT, corrupt_ids=tuple(range(24)), rng=rng)
        with pytest.raises(NoConsensusError):
            ransac_pose_consensus(
                hyps, cube, intr, RansacConfig(min_inliers=4), np.random.default_rng(1)
            )

    def test_order_independent_when_untied(self, cube, intr):
        rng = np.random.default_rng(9)
        hyps = _hypotheses(cube, intr, self.GT, (0, 1, 2, 3, 4), rng)
        res_fwd = ransac_pose_consensus(hyps, cube, intr, RansacConfig(), np.random.default_rng(0))
        perm = np.random.default_rng(5).permutation(len(hyps))
        res_perm = ransac_pose_consensus(
            [hyps[i] for i in perm], cube, intr, RansacConfig(), np.random.default_rng(0)
        )
        assert sorted(res_fwd.inlier_ids) == sorted(res_perm.inlier_ids)
        np.testing.assert_allclose(res_fwd.pose.rotvec, res_perm.pose.rotvec, atol=1e-9)
        np.testing.assert_allclose(res_fwd.pose.translation, res_perm.pose.translation, atol=1e-7)

    def test_refined_rms_not_worse_than_raw(self, cube, intr):
        rng = np.random.default_rng(11)
        hyps = []
        for marker in cube.markers:
            corners = project_marker(marker, self.GT, intr) + rng.normal(0, 0.4, (4, 2))
            hyps.append(
                estimate_marker_pose(MarkerDetection(marker.marker_id, corners), cube, intr)
            )
        res = ransac_pose_consensus(
            hyps, cube, intr, RansacConfig(threshold_px=4.0), np.random.default_rng(2)
        )
        # raw best on the same inlier set
        from handrig.camera_geometry import _corner_errors

        best_raw = np.inf
        dets = [h.detection for h in hyps]
        inl = res.inlier_indices
        for h in hyps:
            errs = _corner_errors(h.pose, [dets[i] for i in inl], cube, intr)
            raw_rms = np.sqrt(np.mean(np.square(errs)))
            best_raw = min(best_raw, raw_rms)
        assert res.rms_px <= best_raw + 1e-12


class TestCubeSpec:
    def test_default_structure(self, cube):
        assert len(cube.markers) == 24
        assert len({m.marker_id for m in cube.markers}) == 24
        faces = {}
        for m in cube.markers:
            faces[m.face] = faces.get(m.face, 0) + 1
        assert faces == {f: 4 for f in range(6)}

    def test_non_square_rejected(self, cube):
        from handrig.camera_geometry import MarkerCubeSpec, MarkerSpec

        bad = list(cube.markers)
        corners = bad[0].corners.copy()
        corners[0] += 0.5
        bad[0] = MarkerSpec(bad[0].marker_id, bad[0].face, corners)
        with pytest.raises(ValueError):
            MarkerCubeSpec(edge_mm=cube.edge_mm, markers=tuple(bad))

    def test_json_roundtrip(self, cube):
        text = canonical_dumps(cube.to_dict())
        from handrig.camera_geometry import MarkerCubeSpec

        again = MarkerCubeSpec.from_dict(json.loads(text))
        assert canonical_dumps(again.to_dict()) == text


class TestSerialization:
    def test_camera_roundtrip(self, rig):
        for cam in rig:
            text = canonical_dumps(cam.to_dict())
            again = CameraModel.from_dict(json.loads(text))
            assert canonical_dumps(again.to_dict()) == text

    def test_detection_roundtrip(self):
        det = MarkerDetection(3, np.array([[1.5, 2], [3, 4], [5, 6], [7, 8.25]]), 0.75)
        text = canonical_dumps(det.to_dict())
        again = MarkerDetection.from_dict(json.loads(text))
        assert canonical_dumps(again.to_dict()) == text
