import numpy as np
import pytest

from handrig.hand_model import (
    DOF_SUBTREE,
    N_JOINTS,
    N_THETA,
    DimensionError,
    HandParams,
    JointLimits,
    SkeletonTemplate,
    default_limits,
    default_template,
    fk_points,
    forward_kinematics,
    hinge_violations,
    limit_penalty,
    load_hand_file,
    validate_limits,
)
from handrig.jsonio import canonical_dump


@pytest.fixture(scope="module")
def template():
    return default_template()


@pytest.fixture(scope="module")
def limits():
    return default_limits()


def random_params(rng, limits, margin=0.0):
    theta = rng.uniform(limits.lower + margin, limits.upper - margin)
    phi = np.concatenate([rng.uniform(-50, 50, 3), rng.uniform(-0.6, 0.6, 3)])
    return HandParams(theta, np.ones(5), phi)


class TestHandParams:
    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            HandParams(np.zeros(19), np.ones(5), np.zeros(6))
        with pytest.raises(DimensionError):
            HandParams(np.zeros(20), np.ones(4), np.zeros(6))
        with pytest.raises(DimensionError):
            HandParams(np.zeros(20), np.ones(5), np.zeros(7))

    def test_gamma_positive(self):
        gamma = np.ones(5)
        gamma[2] = 0.0
        with pytest.raises(ValueError):
            HandParams(np.zeros(20), gamma, np.zeros(6))

    def test_finite(self):
        theta = np.zeros(20)
        theta[3] = np.nan
        with pytest.raises(ValueError):
            HandParams(theta, np.ones(5), np.zeros(6))


class TestForwardKinematics:
    def test_identity_configuration_matches_rest_pose(self, template):
        joints = forward_kinematics(HandParams.rest(), template)
        assert joints.frame == "world"
        np.testing.assert_allclose(joints.points, template.rest_joints(), atol=1e-12)

    def test_gamma_two_doubles_every_segment(self, template):
        params = HandParams(np.zeros(20), np.full(5, 2.0), np.zeros(6))
        pts = fk_points(params, template)
        assert np.allclose(pts[0], 0.0)
        np.testing.assert_allclose(pts, 2.0 * template.rest_joints(), rtol=1e-12)

    def test_translation_shifts_all_joints(self, template, limits):
        rng = np.random.default_rng(3)
        params = random_params(rng, limits)
        base = fk_points(params, template)
        shifted_phi = params.phi.copy()
        shifted_phi[:3] += (10.0, 0.0, 0.0)
        shifted = fk_points(params.with_phi(shifted_phi), template)
        np.testing.assert_allclose(shifted - base, np.tile([10.0, 0.0, 0.0], (21, 1)), atol=1e-9)

    def test_rigidity_under_global_pose(self, template, limits):
        rng = np.random.default_rng(11)
        for _ in range(10):
            params = random_params(rng, limits)
            a = fk_points(params, template)
            moved = params.with_phi(np.concatenate([rng.uniform(-80, 80, 3),
                                                    rng.uniform(-np.pi, np.pi, 3)]))
            b = fk_points(moved, template)
            da = np.linalg.norm(a[:, None] - a[None, :], axis=2)
            db = np.linalg.norm(b[:, None] - b[None, :], axis=2)
            np.testing.assert_allclose(da, db, rtol=1e-9, atol=1e-9)

    def test_scale_linearity_per_finger(self, template, limits):
        rng = np.random.default_rng(7)
        params = random_params(rng, limits)
        base = fk_points(params, template)
        for f in range(5):
            gamma = np.ones(5)
            gamma[f] = 1.7
            scaled = fk_points(HandParams(params.theta, gamma, params.phi), template)
            chain = [1 + 4 * f + s for s in range(4)]
            parents = [0] + chain[:-1]
            for j, p in zip(chain, parents):
                seg_base = np.linalg.norm(base[j] - base[p])
                seg_scaled = np.linalg.norm(scaled[j] - scaled[p])
                assert seg_scaled == pytest.approx(1.7 * seg_base, rel=1e-12)
            # other fingers untouched
            others = [j for j in range(1, 21) if (j - 1) // 4 != f]
            np.testing.assert_allclose(scaled[others], base[others], atol=1e-12)

    def test_ancestor_locality_bit_identical(self, template, limits):
        rng = np.random.default_rng(13)
        params = random_params(rng, limits, margin=0.1)
        base = fk_points(params, template)
        for d in range(N_THETA):
            theta = params.theta.copy()
            theta[d] += 0.05
            perturbed = fk_points(HandParams(theta, params.gamma, params.phi), template)
            inside = list(DOF_SUBTREE[d])
            outside = [j for j in range(N_JOINTS) if j not in inside]
            assert np.array_equal(perturbed[outside], base[outside])
            assert not np.allclose(perturbed[inside], base[inside])


class TestLimitPenalty:
    def test_inside_limits_zero_both_modes(self, limits):
        params = HandParams.rest()
        assert limit_penalty(params, limits, "hard") == 0.0
        assert limit_penalty(params, limits, "smooth") == 0.0

    def test_single_violation_forced_values(self, limits):
        lim = JointLimits(limits.lower, limits.upper, penalty_constant=1.0)
        theta = np.zeros(20)
        theta[5] = lim.upper[5] + 0.1
        params = HandParams(theta, np.ones(5), np.zeros(6))
        assert limit_penalty(params, lim, "hard") == pytest.approx(1.0)
        assert limit_penalty(params, lim, "smooth") == pytest.approx(0.01)

    def test_three_violations_hand_summed(self, limits):
        lim = JointLimits(limits.lower, limits.upper, penalty_constant=10.0)
        theta = np.zeros(20)
        theta[1] = lim.upper[1] + 0.2
        theta[6] = lim.upper[6] + 0.2
        theta[10] = lim.lower[10] - 0.2
        params = HandParams(theta, np.ones(5), np.zeros(6))
        assert limit_penalty(params, lim, "hard") == pytest.approx(30.0)
        assert limit_penalty(params, lim, "smooth") == pytest.approx(10 * 3 * 0.04)

    def test_smooth_gradient_matches_finite_differences(self, limits):
        rng = np.random.default_rng(5)
        for _ in range(20):
            theta = rng.uniform(limits.lower - 0.3, limits.upper + 0.3)
            hinge = np.maximum(0, theta - limits.upper) + np.maximum(0, limits.lower - theta)
            if np.any((hinge > 0) & (hinge < 1e-3)):
                continue   # step straddles the kink
            params = HandParams(theta, np.ones(5), np.zeros(6))
            grad = 2.0 * limits.penalty_constant * hinge * np.sign(
                np.maximum(0, theta - limits.upper) - np.maximum(0, limits.lower - theta)
            )
            h = 1e-6
            fd = np.empty(N_THETA)
            for j in range(N_THETA):
                tp, tm = theta.copy(), theta.copy()
                tp[j] += h
                tm[j] -= h
                fd[j] = (
                    limit_penalty(HandParams(tp, np.ones(5), np.zeros(6)), limits, "smooth")
                    - limit_penalty(HandParams(tm, np.ones(5), np.zeros(6)), limits, "smooth")
                ) / (2 * h)
            denom = np.maximum(np.abs(fd), 1e-8)
            assert np.max(np.abs(grad - fd) / denom) < 1e-5


class TestValidateLimits:
    def test_in_bounds_empty(self, limits):
        assert validate_limits(HandParams.rest(), limits) == []

    def test_specific_violations_ascending(self, limits):
        theta = np.zeros(20)
        theta[17] = limits.upper[17] + 0.5
        theta[3] = limits.lower[3] - 0.5
        params = HandParams(theta, np.ones(5), np.zeros(6))
        assert validate_limits(params, limits) == [3, 17]

    def test_equivalence_with_hard_penalty(self, limits):
        rng = np.random.default_rng(17)
        for _ in range(50):
            theta = rng.uniform(limits.lower - 0.5, limits.upper + 0.5)
            params = HandParams(theta, np.ones(5), np.zeros(6))
            empty = validate_limits(params, limits) == []
            assert empty == (limit_penalty(params, limits, "hard") == 0.0)
            hinges = hinge_violations(params, limits)
            assert validate_limits(params, limits) == np.flatnonzero(hinges > 0).tolist()


class TestHandFile:
    def test_default_template_valid(self, template, limits):
        assert template.rest_offsets.shape == (21, 3)
        assert np.all(template.segment_lengths()[1:] > 0)
        assert np.all(limits.lower < limits.upper)

    def test_roundtrip_through_json(self, template, limits, tmp_path):
        path = tmp_path / "hand.json"
        canonical_dump(
            {"template": template.to_dict(), "limits": limits.to_dict()}, path
        )
        tpl2, lim2 = load_hand_file(path)
        np.testing.assert_allclose(tpl2.rest_offsets, template.rest_offsets, atol=1e-8)
        np.testing.assert_allclose(lim2.lower, limits.lower)
        assert lim2.mode == limits.mode

    def test_bad_parents_rejected(self, template):
        with pytest.raises(ValueError):
            SkeletonTemplate(
                rest_offsets=template.rest_offsets,
                dof_axes=template.dof_axes,
                parents=tuple([0] * 21),
            )

    def test_zero_length_segment_rejected(self, template):
        offsets = template.rest_offsets.copy()
        offsets[4] = 0.0
        with pytest.raises(ValueError):
            SkeletonTemplate(rest_offsets=offsets, dof_axes=template.dof_axes)

    def test_limits_require_order_and_positive_constant(self, limits):
        bad_upper = limits.upper.copy()
        bad_upper[0] = limits.lower[0]
        with pytest.raises(ValueError):
            JointLimits(limits.lower, bad_upper)
        with pytest.raises(ValueError):
            JointLimits(limits.lower, limits.upper, penalty_constant=0.0)
        with pytest.raises(ValueError):
            JointLimits(limits.lower, limits.upper, mode="quadratic")
