"""Synthetic multi-view scene generation standing in for a 2D keypoint detector.

A scene is a ground-truth hand configuration rendered into per-view joint
"detections": true projections plus a detector bias, Gaussian pixel noise,
and geometric occluders (thick line linkages between joints and circles)
that knock down per-joint confidence and add a larger displacement.
Visibility weights come from a synthetic hand mask (dilated convex hull of
the true projections) applied to the noisy detections, mirroring how a real
mask would be used.

Everything random draws from an explicit generator passed in by the caller;
rendering the same inputs with the same generator state is bit-identical.
Noise is drawn as ``sigma * standard_normal`` so batches regenerated at a
different sigma reuse the same underlying draws.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from shapely.geometry import MultiPoint

from .camera_geometry import CameraIntrinsics, CameraModel, look_at_camera, project_many
from .hand_model import (
    N_JOINTS,
    HandParams,
    JointLimits,
    SkeletonTemplate,
    fk_points,
)
from .rotations import matrix_to_rotvec, rotvec_to_matrix
from .skeleton_fitter import (
    STATUS_STALLED,
    FitConfig,
    ViewObservation,
    assign_visibility,
    fit,
    initial_params,
)

MASK_DILATION_PX = 10.0


@dataclass(frozen=True)
class DetectorModel:
    """Bias + noise model of the keypoint detector being simulated."""

    bias_px: np.ndarray              # (2,) added to every joint detection
    sigma_px: float = 0.5
    base_confidence: float = 0.95
    occlusion_penalty: float = 0.6   # confidence drop for occluded joints
    occluded_noise_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "bias_px", np.asarray(self.bias_px, dtype=float).reshape(2))
        if self.sigma_px < 0:
            raise ValueError("sigma must be non-negative")
        if not 0.0 <= self.base_confidence <= 1.0:
            raise ValueError("base confidence must be in [0, 1]")

    def confidence(self, occluded: np.ndarray) -> np.ndarray:
        return np.clip(self.base_confidence - self.occlusion_penalty * occluded, 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "bias_px": self.bias_px.tolist(),
            "sigma_px": self.sigma_px,
            "base_confidence": self.base_confidence,
            "occlusion_penalty": self.occlusion_penalty,
            "occluded_noise_scale": self.occluded_noise_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorModel":
        return cls(
            bias_px=np.array(d.get("bias_px", [0.0, 0.0])),
            sigma_px=float(d.get("sigma_px", 0.5)),
            base_confidence=float(d.get("base_confidence", 0.95)),
            occlusion_penalty=float(d.get("occlusion_penalty", 0.6)),
            occluded_noise_scale=float(d.get("occluded_noise_scale", 3.0)),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class OcclusionSpec:
    """How many line linkages / circles to draw and their size ranges."""

    n_lines: int = 2
    n_circles: int = 1
    line_width_px: tuple = (6.0, 24.0)
    circle_radius_px: tuple = (12.0, 48.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_lines < 0 or self.n_circles < 0:
            raise ValueError("occluder counts must be non-negative")
        if min(self.line_width_px) <= 0 or min(self.circle_radius_px) <= 0:
            raise ValueError("occluder sizes must be positive")

    def zeroed(self) -> "OcclusionSpec":
        return replace(self, n_lines=0, n_circles=0)

    def to_dict(self) -> dict:
        return {
            "n_lines": self.n_lines,
            "n_circles": self.n_circles,
            "line_width_px": list(self.line_width_px),
            "circle_radius_px": list(self.circle_radius_px),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OcclusionSpec":
        return cls(
            n_lines=int(d.get("n_lines", 2)),
            n_circles=int(d.get("n_circles", 1)),
            line_width_px=tuple(d.get("line_width_px", (6.0, 24.0))),
            circle_radius_px=tuple(d.get("circle_radius_px", (12.0, 48.0))),
            seed=int(d.get("seed", 0)),
        )


@dataclass(frozen=True)
class LineOcclusion:
    p0: np.ndarray
    p1: np.ndarray
    width: float

    def covers(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        d = self.p1 - self.p0
        L2 = float(d @ d)
        if L2 == 0:
            dist = np.linalg.norm(pts - self.p0, axis=1)
        else:
            t = np.clip((pts - self.p0) @ d / L2, 0.0, 1.0)
            dist = np.linalg.norm(self.p0 + t[:, None] * d - pts, axis=1)
        return dist <= self.width / 2.0

    def to_dict(self) -> dict:
        return {"kind": "line", "p0_px": self.p0.tolist(), "p1_px": self.p1.tolist(),
                "width_px": self.width}


@dataclass(frozen=True)
class CircleOcclusion:
    center: np.ndarray
    radius: float

    def covers(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        return np.linalg.norm(pts - self.center, axis=1) <= self.radius

    def to_dict(self) -> dict:
        return {"kind": "circle", "center_px": self.center.tolist(), "radius_px": self.radius}


def occluder_from_dict(d: dict):
    if d["kind"] == "line":
        return LineOcclusion(np.array(d["p0_px"]), np.array(d["p1_px"]), float(d["width_px"]))
    if d["kind"] == "circle":
        return CircleOcclusion(np.array(d["center_px"]), float(d["radius_px"]))
    raise ValueError(f"unknown occluder kind {d['kind']!r}")


def gen_occlusion(joints2d: np.ndarray, spec: OcclusionSpec, rng: np.random.Generator):
    """Sample occluder primitives over the joints and flag covered joints.

    Line linkages connect random joint pairs; circles land near the joint
    bounding box.  A joint counts as occluded when it lies within half a
    stroke width of a linkage or inside a circle.
    """
    joints2d = np.asarray(joints2d, dtype=float)
    n = len(joints2d)
    if spec.n_lines > 0 and n < 2:
        raise ValueError("line linkages need at least two joints")
    primitives = []
    for _ in range(spec.n_lines):
        i, j = rng.choice(n, size=2, replace=False)
        width = rng.uniform(*spec.line_width_px)
        primitives.append(LineOcclusion(joints2d[i].copy(), joints2d[j].copy(), float(width)))
    lo = joints2d.min(axis=0) - 10.0
    hi = joints2d.max(axis=0) + 10.0
    for _ in range(spec.n_circles):
        center = rng.uniform(lo, hi)
        radius = rng.uniform(*spec.circle_radius_px)
        primitives.append(CircleOcclusion(center, float(radius)))
    occluded = np.zeros(n, dtype=bool)
    for prim in primitives:
        occluded |= prim.covers(joints2d)
    return primitives, occluded


def occluded_flags(joints2d: np.ndarray, primitives) -> np.ndarray:
    """Recompute coverage flags from emitted primitives (pure geometry)."""
    occluded = np.zeros(len(joints2d), dtype=bool)
    for prim in primitives:
        occluded |= prim.covers(np.asarray(joints2d, dtype=float))
    return occluded


def hand_mask_polygon(joints2d: np.ndarray, dilation_px: float = MASK_DILATION_PX) -> np.ndarray:
    """Synthetic hand mask: convex hull of the projections, dilated outward."""
    hull = MultiPoint(np.asarray(joints2d, dtype=float)).convex_hull
    poly = hull.buffer(dilation_px, quad_segs=4)
    return np.asarray(poly.exterior.coords[:-1], dtype=float)


@dataclass
class SceneRecord:
    """Ground truth plus everything the simulated detector produced."""

    params: HandParams
    joints: np.ndarray              # (21, 3) world mm, FK of params
    observations: list
    occluders: list                 # per kept view: list of primitives
    occluded: np.ndarray            # (views, 21) bool, aligned with observations

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "params": self.params.to_dict(),
            "joints_mm": self.joints.tolist(),
            "observations": [o.to_dict() for o in self.observations],
            "occluders": [[p.to_dict() for p in prims] for prims in self.occluders],
            "occluded": self.occluded.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRecord":
        return cls(
            params=HandParams.from_dict(d["params"]),
            joints=np.array(d["joints_mm"]),
            observations=[ViewObservation.from_dict(o) for o in d["observations"]],
            occluders=[[occluder_from_dict(p) for p in prims] for prims in d["occluders"]],
            occluded=np.array(d["occluded"], dtype=bool),
        )


@dataclass(frozen=True)
class PoseSampler:
    """Sampling ranges for ground-truth poses.

    The global orientation stays within ``cone_deg`` of the canonical
    egocentric orientation; the wrist translation is uniform in the box.
    """

    cone_deg: float = 60.0
    canonical_rotvec: np.ndarray = (0.0, 0.0, 0.0)
    translation_box: np.ndarray = ((-60.0, 60.0), (-60.0, 60.0), (-40.0, 40.0))

    def __post_init__(self):
        object.__setattr__(
            self, "canonical_rotvec", np.asarray(self.canonical_rotvec, dtype=float).reshape(3)
        )
        object.__setattr__(
            self, "translation_box", np.asarray(self.translation_box, dtype=float).reshape(3, 2)
        )

    def to_dict(self) -> dict:
        return {
            "cone_deg": self.cone_deg,
            "canonical_rotvec": self.canonical_rotvec.tolist(),
            "translation_box": self.translation_box.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoseSampler":
        return cls(
            cone_deg=float(d.get("cone_deg", 60.0)),
            canonical_rotvec=np.array(d.get("canonical_rotvec", (0.0, 0.0, 0.0))),
            translation_box=np.array(
                d.get("translation_box", ((-60.0, 60.0), (-60.0, 60.0), (-40.0, 40.0)))
            ),
        )


def sample_pose(
    limits: JointLimits, rng: np.random.Generator, sampler: PoseSampler = PoseSampler()
) -> HandParams:
    """Draw a valid articulation uniformly within limits plus a global pose.

    Orientation = canonical rotation composed with a perturbation about a
    uniform random axis by an angle uniform in [0, cone); always within the
    cone.  Finger scales stay at 1 (the synthetic subject).
    """
    theta = rng.uniform(limits.lower, limits.upper)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, np.radians(sampler.cone_deg))
    R = rotvec_to_matrix(sampler.canonical_rotvec) @ rotvec_to_matrix(axis * angle)
    translation = rng.uniform(sampler.translation_box[:, 0], sampler.translation_box[:, 1])
    return HandParams(theta, np.ones(5), np.concatenate([translation, matrix_to_rotvec(R)]))


def default_rig(
    fx: float = 900.0, width: int = 1280, height: int = 720, distance: float = 600.0
) -> list:
    """Three cameras looking at the hand workspace origin from above."""
    intr = CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, width, height)
    d = distance
    positions = [
        (0.0, -0.70 * d, 0.80 * d),
        (0.72 * d, -0.25 * d, 0.70 * d),
        (-0.72 * d, -0.25 * d, 0.70 * d),
    ]
    return [look_at_camera(p, (0.0, 0.0, 0.0), intr) for p in positions]


def render_detections(
    gt: HandParams,
    rig: list,
    template: SkeletonTemplate,
    detector: DetectorModel,
    occ: OcclusionSpec,
    rng: np.random.Generator,
) -> SceneRecord:
    """Simulate per-view joint detections of the ground-truth hand.

    Occlusion flags come from the true projections; noisy detections get
    the detector bias, sigma-scaled Gaussian noise, and an extra
    displacement on occluded joints.  Views where fewer than 4 joints land
    inside the image are dropped with a warning.
    """
    joints = fk_points(gt, template)
    observations = []
    occluders_per_view = []
    occluded_rows = []
    for view_index, camera in enumerate(rig):
        uv, z = project_many(camera, joints)
        if np.any(z <= 0):
            raise ValueError(f"view {view_index}: ground-truth joints behind the camera")
        intr = camera.intrinsics
        in_bounds = (
            (uv[:, 0] >= 0) & (uv[:, 0] < intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
        )
        if np.count_nonzero(in_bounds) < 4:
            warnings.warn(f"view {view_index} sees fewer than 4 joints; dropped", stacklevel=2)
            continue
        primitives, occluded = gen_occlusion(uv, occ, rng)
        noise = detector.sigma_px * rng.standard_normal((N_JOINTS, 2))
        extra = (
            detector.occluded_noise_scale * detector.sigma_px
            * rng.standard_normal((N_JOINTS, 2))
        )
        pixels = uv + detector.bias_px + noise + np.where(occluded[:, None], extra, 0.0)
        mask = hand_mask_polygon(uv)
        observations.append(
            ViewObservation(
                view_index=view_index,
                camera=camera,
                pixels=pixels,
                confidence=detector.confidence(occluded),
                visibility=assign_visibility(pixels, mask),
                mask=mask,
            )
        )
        occluders_per_view.append(primitives)
        occluded_rows.append(occluded)
    return SceneRecord(
        params=gt,
        joints=joints,
        observations=observations,
        occluders=occluders_per_view,
        occluded=np.stack(occluded_rows) if occluded_rows else np.zeros((0, N_JOINTS), bool),
    )


def sample_valid_pose(
    limits: JointLimits,
    rig: list,
    template: SkeletonTemplate,
    rng: np.random.Generator,
    sampler: PoseSampler = PoseSampler(),
    max_tries: int = 200,
) -> HandParams:
    """Sample poses until every joint is in front of and inside every view."""
    for _ in range(max_tries):
        params = sample_pose(limits, rng, sampler)
        joints = fk_points(params, template)
        ok = True
        for camera in rig:
            uv, z = project_many(camera, joints)
            intr = camera.intrinsics
            inside = (
                (uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
                & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height)
            )
            if np.any(z <= 0) or not np.all(inside):
                ok = False
                break
        if ok:
            return params
    raise RuntimeError(f"no fully visible pose found in {max_tries} draws")


@dataclass
class RoundReport:
    round_index: int
    bias_norm_start: float
    bias_norm_end: float
    accepted_fraction: float
    mean_error_mm: float | None      # None when the round accepted nothing

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "bias_norm_start": self.bias_norm_start,
            "bias_norm_end": self.bias_norm_end,
            "accepted_fraction": self.accepted_fraction,
            "mean_error_mm": self.mean_error_mm,
        }


@dataclass
class BootstrapReport:
    rounds: list
    status: str                      # "completed" | "stalled"

    def to_dict(self) -> dict:
        return {"status": self.status, "rounds": [r.to_dict() for r in self.rounds]}


def bootstrap_loop(
    gt_poses: list,
    rig: list,
    template: SkeletonTemplate,
    limits: JointLimits,
    detector: DetectorModel,
    occ: OcclusionSpec,
    fit_config: FitConfig,
    rounds: int,
    rng: np.random.Generator,
    gate_mean_px: float | None = None,
    alpha: float = 0.8,
) -> BootstrapReport:
    """Iterate render -> fit -> accept -> shrink detector bias.

    Each round re-renders every pose with the current detector and fits it
    from a triangulation start.  Frames whose mean pixel residual passes
    the gate contribute pseudo-labels (their reprojected fitted joints);
    the accepted fraction drives the bias update
    ``bias <- bias * (1 - alpha * accepted_fraction)``.  A round that
    accepts nothing halts the loop with a stalled report.
    """
    if rounds < 1:
        raise ValueError("at least one round required")
    gate = fit_config.gate_mean_px if gate_mean_px is None else gate_mean_px
    bias = detector.bias_px.copy()
    reports = []
    status = "completed"
    for round_index in range(1, rounds + 1):
        round_detector = replace(detector, bias_px=bias)
        accepted = 0
        errors = []
        for pose in gt_poses:
            scene = render_detections(pose, rig, template, round_detector, occ, rng)
            init = initial_params(scene.observations, template, limits)
            result = fit(scene.observations, template, limits, init, fit_config)
            if result.status == STATUS_STALLED or result.mean_residual_px > gate:
                continue
            accepted += 1
            fitted = fk_points(result.params, template)
            errors.append(float(np.mean(np.linalg.norm(fitted - scene.joints, axis=1))))
        fraction = accepted / len(gt_poses)
        if accepted == 0:
            reports.append(
                RoundReport(round_index, float(np.linalg.norm(bias)),
                            float(np.linalg.norm(bias)), 0.0, None)
            )
            status = "stalled"
            break
        new_bias = bias * (1.0 - alpha * fraction)
        reports.append(
            RoundReport(
                round_index,
                float(np.linalg.norm(bias)),
                float(np.linalg.norm(new_bias)),
                fraction,
                float(np.mean(errors)),
            )
        )
        bias = new_bias
    return BootstrapReport(rounds=reports, status=status)
