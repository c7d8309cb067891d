import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from handrig.camera_geometry import CameraIntrinsics, look_at_camera, project_many
from handrig.hand_model import HandParams, default_limits, default_template, fk_points
from handrig.skeleton_fitter import (
    STATUS_CONVERGED,
    STATUS_REJECTED,
    FitConfig,
    InvalidMaskError,
    ViewObservation,
    assign_visibility,
    check_gradient,
    fit,
    initial_params,
    reprojection_loss,
    total_loss,
)


@pytest.fixture(scope="module")
def template():
    return default_template()


@pytest.fixture(scope="module")
def limits():
    return default_limits()


@pytest.fixture(scope="module")
def rig():
    intr = CameraIntrinsics(900.0, 900.0, 640.0, 360.0, 1280, 720)
    return [
        look_at_camera([0, -420, 480], [0, 0, 0], intr),
        look_at_camera([430, -150, 420], [0, 0, 0], intr),
        look_at_camera([-430, -150, 420], [0, 0, 0], intr),
    ]


def exact_observations(params, template, rig, confidence=None, visibility=None):
    pts = fk_points(params, template)
    obs = []
    for i, cam in enumerate(rig):
        uv, z = project_many(cam, pts)
        assert np.all(z > 0)
        obs.append(
            ViewObservation(
                i,
                cam,
                uv,
                np.ones(21) if confidence is None else confidence,
                np.ones(21) if visibility is None else visibility,
            )
        )
    return obs


def sample_params(rng, limits, margin=0.05):
    theta = rng.uniform(limits.lower + margin, limits.upper - margin)
    phi = np.concatenate([rng.uniform(-50, 50, 3), rng.uniform(-0.5, 0.5, 3)])
    return HandParams(theta, np.ones(5), phi)


class TestAssignVisibility:
    SQUARE = np.array([[0.0, 0.0], [100.0, 0.0], [100.0, 100.0], [0.0, 100.0]])

    def test_all_inside(self):
        pts = np.full((21, 2), 50.0)
        np.testing.assert_array_equal(assign_visibility(pts, self.SQUARE), np.ones(21))

    def test_boundary_counts_inside(self):
        pts = np.array([[0.0, 50.0], [100.0, 100.0], [50.0, 0.0]])
        np.testing.assert_array_equal(assign_visibility(pts, self.SQUARE), [1.0, 1.0, 1.0])

    def test_seven_outside_square(self):
        rng = np.random.default_rng(0)
        inside = rng.uniform(5, 95, (14, 2))
        outside = rng.uniform(110, 200, (7, 2))
        pts = np.concatenate([inside, outside])
        v = assign_visibility(pts, self.SQUARE)
        np.testing.assert_array_equal(v[:14], 1.0)
        np.testing.assert_array_equal(v[14:], 0.5)

    def test_matches_shapely_on_random_polygons(self):
        # brute-force oracle: shapely covers() (boundary inclusive)
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = rng.integers(3, 9)
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            rad = rng.uniform(20, 60, n)
            poly = np.column_stack([50 + rad * np.cos(ang), 50 + rad * np.sin(ang)])
            shp = Polygon(poly)
            if not shp.is_valid:
                continue
            pts = rng.uniform(-20, 120, (50, 2))
            expected = np.where([shp.covers(Point(p)) for p in pts], 1.0, 0.5)
            np.testing.assert_array_equal(assign_visibility(pts, poly), expected)

    def test_self_intersecting_mask_rejected(self):
        bowtie = np.array([[0.0, 0.0], [10.0, 10.0], [10.0, 0.0], [0.0, 10.0]])
        with pytest.raises(InvalidMaskError):
            assign_visibility(np.zeros((1, 2)), bowtie)


class TestReprojectionLoss:
    def test_zero_at_exact_detections(self, template, limits, rig):
        rng = np.random.default_rng(2)
        params = sample_params(rng, limits)
        obs = exact_observations(params, template, rig)
        assert reprojection_loss(params, template, obs) == pytest.approx(0.0, abs=1e-9)

    def test_three_four_five(self, template, limits, rig):
        params = HandParams.rest()
        obs = exact_observations(params, template, rig[:1])
        conf = np.zeros(21)
        conf[4] = 1.0
        pixels = obs[0].pixels.copy()
        pixels[4] += (3.0, 4.0)
        single = ViewObservation(0, rig[0].camera if False else rig[0], pixels, conf, np.ones(21))
        assert reprojection_loss(params, template, [single]) == pytest.approx(5.0)

    def test_weights_scale_term(self, template, rig):
        params = HandParams.rest()
        obs = exact_observations(params, template, rig[:1])
        conf = np.zeros(21)
        conf[4] = 0.8
        vis = np.ones(21)
        vis[4] = 0.5
        pixels = obs[0].pixels.copy()
        pixels[4] += (3.0, 4.0)
        single = ViewObservation(0, rig[0], pixels, conf, vis)
        assert reprojection_loss(params, template, [single]) == pytest.approx(0.5 * 0.8 * 5.0)

    def test_view_and_joint_permutation_invariance(self, template, limits, rig):
        rng = np.random.default_rng(3)
        params = sample_params(rng, limits)
        obs = exact_observations(params, template, rig)
        noisy = []
        for o in obs:
            noisy.append(
                ViewObservation(
                    o.view_index, o.camera, o.pixels + rng.normal(0, 2, (21, 2)),
                    rng.uniform(0.2, 1.0, 21),
                    np.where(rng.random(21) < 0.5, 0.5, 1.0),
                )
            )
        base = reprojection_loss(params, template, noisy)
        shuffled = [noisy[2], noisy[0], noisy[1]]
        assert reprojection_loss(params, template, shuffled) == pytest.approx(base, rel=1e-12)


class TestTotalLoss:
    def test_zero_residuals_in_bounds(self, template, limits, rig):
        params = HandParams.rest()
        obs = exact_observations(params, template, rig)
        split = total_loss(params, template, obs, limits)
        assert split.total == pytest.approx(0.0, abs=1e-9)
        assert split.total == split.loss_2d + split.loss_model

    def test_component_sum(self, template, limits, rig):
        from handrig.hand_model import JointLimits, limit_penalty

        rng = np.random.default_rng(4)
        params = sample_params(rng, limits)
        theta = params.theta.copy()
        theta[0] = limits.upper[0] + 0.1
        params = HandParams(theta, params.gamma, params.phi)
        obs = exact_observations(params, template, rig)
        lim1 = JointLimits(limits.lower, limits.upper, penalty_constant=1.0)
        split = total_loss(params, template, obs, lim1, mode="smooth")
        assert split.loss_model == pytest.approx(0.01)
        expected = reprojection_loss(params, template, obs) + limit_penalty(params, lim1, "smooth")
        assert split.total == pytest.approx(expected, rel=1e-12)


class TestFit:
    def test_init_at_truth_converges_immediately(self, template, limits, rig):
        rng = np.random.default_rng(5)
        params = sample_params(rng, limits)
        obs = exact_observations(params, template, rig)
        res = fit(obs, template, limits, params)
        assert res.status == STATUS_CONVERGED
        assert res.iterations <= 2
        assert res.total_loss < 1e-8

    def test_recovery_from_perturbed_init(self, template, limits, rig):
        failures = 0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            gt = sample_params(rng, limits, margin=0.1)
            obs = exact_observations(gt, template, rig)
            delta = rng.normal(0, 0.03, 20)
            delta *= min(1.0, 0.15 / max(np.linalg.norm(delta), 1e-9))
            init = HandParams(
                np.clip(gt.theta + delta, limits.lower, limits.upper),
                gt.gamma,
                gt.phi + rng.normal(0, 0.01, 6),
            )
            res = fit(obs, template, limits, init)
            err = np.linalg.norm(
                fk_points(res.params, template) - fk_points(gt, template), axis=1
            ).mean()
            if err > 1e-3:
                failures += 1
        assert failures == 0

    def test_loss_trace_monotone_nonincreasing(self, template, limits, rig):
        rng = np.random.default_rng(6)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        noisy = [
            ViewObservation(o.view_index, o.camera, o.pixels + rng.normal(0, 1.0, (21, 2)),
                            np.ones(21), np.ones(21))
            for o in obs
        ]
        init = initial_params(noisy, template, limits)
        res = fit(noisy, template, limits, init)
        trace = np.asarray(res.trace)
        assert np.all(np.diff(trace) <= 0)
        assert res.loss_2d == pytest.approx(
            reprojection_loss(res.params, template, noisy), abs=1e-9
        )

    def test_zero_confidence_joint_ignored_bitwise(self, template, limits, rig):
        rng = np.random.default_rng(7)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        conf = np.ones(21)
        conf[8] = 0.0
        moved = obs[1].pixels.copy()
        moved[8] += (250.0, -400.0)
        obs_a = [obs[0], ViewObservation(1, rig[1], obs[1].pixels, conf, np.ones(21)), obs[2]]
        obs_b = [obs[0], ViewObservation(1, rig[1], moved, conf, np.ones(21)), obs[2]]
        init = sample_params(np.random.default_rng(8), limits, margin=0.1)
        res_a = fit(obs_a, template, limits, init)
        res_b = fit(obs_b, template, limits, init)
        assert np.array_equal(res_a.params.theta, res_b.params.theta)
        assert np.array_equal(res_a.params.phi, res_b.params.phi)
        assert res_a.total_loss == res_b.total_loss

    def test_deterministic(self, template, limits, rig):
        rng = np.random.default_rng(9)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        init = sample_params(np.random.default_rng(10), limits, margin=0.1)
        res_a = fit(obs, template, limits, init)
        res_b = fit(obs, template, limits, init)
        assert np.array_equal(res_a.params.theta, res_b.params.theta)
        assert res_a.trace == res_b.trace

    def test_gate_rejects_bad_frames(self, template, limits, rig):
        rng = np.random.default_rng(11)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        wrecked = [
            ViewObservation(o.view_index, o.camera,
                            o.pixels + rng.normal(0, 80.0, (21, 2)), np.ones(21), np.ones(21))
            for o in obs
        ]
        init = initial_params(wrecked, template, limits)
        res = fit(wrecked, template, limits, init, FitConfig(gate_mean_px=5.0))
        assert res.status == STATUS_REJECTED

    def test_result_serializes(self, template, limits, rig):
        from handrig.jsonio import canonical_dumps

        rng = np.random.default_rng(12)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        res = fit(obs, template, limits, gt)
        text = canonical_dumps(res.to_dict())
        assert '"status":"converged"' in text


class TestInitialParams:
    def test_triangulation_init_close_on_exact_data(self, template, limits, rig):
        rng = np.random.default_rng(13)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        init = initial_params(obs, template, limits)
        err = np.linalg.norm(fk_points(init, template) - fk_points(gt, template), axis=1).mean()
        assert err < 1.0     # the 2D fit polishes the rest

    def test_requires_enough_joints(self, template, limits, rig):
        rng = np.random.default_rng(14)
        gt = sample_params(rng, limits)
        obs = exact_observations(gt, template, rig, confidence=np.zeros(21))
        with pytest.raises(ValueError):
            initial_params(obs, template, limits)


class TestCheckGradient:
    def test_random_states_under_tolerance(self, template, limits, rig):
        rng = np.random.default_rng(15)
        for _ in range(10):
            gt = sample_params(rng, limits, margin=0.1)
            obs = exact_observations(gt, template, rig)
            noisy = [
                ViewObservation(o.view_index, o.camera,
                                o.pixels + rng.normal(0, 2.0, (21, 2)),
                                rng.uniform(0.3, 1.0, 21),
                                np.where(rng.random(21) < 0.3, 0.5, 1.0))
                for o in obs
            ]
            q = HandParams(
                np.clip(gt.theta + rng.normal(0, 0.05, 20), limits.lower + 0.02,
                        limits.upper - 0.02),
                gt.gamma,
                gt.phi + rng.normal(0, 0.02, 6),
            )
            assert check_gradient(q, template, noisy, limits) < 1e-4

    def test_directional_derivative_translation(self, template, limits, rig):
        rng = np.random.default_rng(16)
        gt = sample_params(rng, limits, margin=0.1)
        obs = exact_observations(gt, template, rig)
        noisy = [
            ViewObservation(o.view_index, o.camera, o.pixels + rng.normal(0, 3.0, (21, 2)),
                            np.ones(21), np.ones(21))
            for o in obs
        ]
        h = 1e-4
        direction = np.zeros(6)
        direction[0] = 1.0
        lo = total_loss(gt.with_phi(gt.phi - h * direction), template, noisy, limits)
        hi = total_loss(gt.with_phi(gt.phi + h * direction), template, noisy, limits)
        fd_dir = (hi.total - lo.total) / (2 * h)

        from handrig.levenberg import fd_jacobian
        from handrig.skeleton_fitter import _System, _pack

        system = _System(noisy, template, limits, "smooth")
        x = _pack(gt)
        J = fd_jacobian(lambda xv: system.residuals(xv, gt.gamma), x, system.fd_steps())
        r = system.residuals(x, gt.gamma)
        n2d = len(noisy) * 21 * 2
        blocks = r[:n2d].reshape(-1, 2)
        norms = np.linalg.norm(blocks, axis=1)
        sqrt_w = system.sqrt_w.ravel()
        grad = np.zeros(26)
        for term in range(blocks.shape[0]):
            if norms[term] > 1e-12:
                Jt = J[2 * term: 2 * term + 2, :]
                grad += sqrt_w[term] * (Jt.T @ blocks[term]) / norms[term]
        grad += 2.0 * J[n2d:, :].T @ r[n2d:]
        assert grad[20] == pytest.approx(fd_dir, rel=1e-5)

    def test_hard_mode_rejected(self, template, limits, rig):
        from handrig.hand_model import JointLimits

        hard = JointLimits(limits.lower, limits.upper, mode="hard")
        gt = HandParams.rest()
        obs = exact_observations(gt, template, rig)
        with pytest.raises(ValueError):
            check_gradient(gt, template, obs, hard)


class TestObservationValidation:
    def test_visibility_values_restricted(self, rig):
        with pytest.raises(ValueError):
            ViewObservation(0, rig[0], np.zeros((21, 2)), np.ones(21), np.full(21, 0.7))

    def test_confidence_range(self, rig):
        with pytest.raises(ValueError):
            ViewObservation(0, rig[0], np.zeros((21, 2)), np.full(21, 1.5), np.ones(21))

    def test_slot_count(self, rig):
        with pytest.raises(ValueError):
            ViewObservation(0, rig[0], np.zeros((20, 2)), np.ones(20), np.ones(20))
