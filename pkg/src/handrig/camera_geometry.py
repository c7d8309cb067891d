"""Pinhole cameras, marker-cube pose hypotheses, and RANSAC consensus.

The calibration object is a cube with four fiducial markers per face; every
marker's corner positions are known in the cube-corner frame, which doubles
as the world frame during capture.  A single detected marker therefore
yields a full 6-DoF camera pose hypothesis (planar DLT homography +
decomposition, refined by least squares on the corner reprojection), and
consensus over all visible markers is found by inlier counting.

Conventions: pixel coordinates are floats, lengths mm, angles radians.
``Pose6D`` maps points from its source frame into its target frame
(``x_dst = R @ x_src + t``); a camera extrinsic maps world to camera, and
``estimate_marker_pose`` returns the cube-to-camera extrinsic.  Cameras
must see pre-undistorted images: there is no lens distortion model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .levenberg import LMOptions, lm_least_squares
from .rotations import matrix_to_rotvec, rotvec_to_matrix


class BehindCameraError(ValueError):
    """Point has non-positive depth in the camera frame."""


class InsufficientViewsError(ValueError):
    """Triangulation needs at least two views."""


class MarkerLookupError(KeyError):
    """Marker id not present in the cube spec."""


class UnstableEstimateError(RuntimeError):
    """Corner configuration too degenerate for a pose estimate."""


class NoConsensusError(RuntimeError):
    """RANSAC found fewer inlier markers than required; drop the frame."""


@dataclass(frozen=True)
class Pose6D:
    """Rigid transform as canonical axis-angle (angle in [0, pi]) + translation."""

    rotvec: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rv = np.asarray(self.rotvec, dtype=float).reshape(3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(rv)) and np.all(np.isfinite(t))):
            raise ValueError("Pose6D requires finite entries")
        angle = float(np.linalg.norm(rv))
        if angle > np.pi:
            wrapped = np.mod(angle, 2.0 * np.pi)
            if wrapped > np.pi:
                wrapped -= 2.0 * np.pi
            rv = rv * (wrapped / angle)
        object.__setattr__(self, "rotvec", rv)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t: np.ndarray) -> "Pose6D":
        return cls(matrix_to_rotvec(R), np.asarray(t, dtype=float))

    def matrix(self) -> np.ndarray:
        return rotvec_to_matrix(self.rotvec)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (3,) or (N, 3) points."""
        R = self.matrix()
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return R @ pts + self.translation
        return pts @ R.T + self.translation

    def inverse(self) -> "Pose6D":
        R = self.matrix()
        return Pose6D(-self.rotvec, -(R.T @ self.translation))

    def compose(self, other: "Pose6D") -> "Pose6D":
        """Transform equal to applying ``other`` first, then ``self``."""
        Ra, Rb = self.matrix(), other.matrix()
        return Pose6D.from_matrix(Ra @ Rb, Ra @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"rotvec_rad": self.rotvec.tolist(), "translation_mm": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose6D":
        return cls(np.array(d["rotvec_rad"]), np.array(d["translation_mm"]))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
        )


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics plus the world-to-camera extrinsic."""

    intrinsics: CameraIntrinsics
    world_to_cam: Pose6D

    def to_dict(self) -> dict:
        return {"intrinsics": self.intrinsics.to_dict(), "world_to_cam": self.world_to_cam.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(CameraIntrinsics.from_dict(d["intrinsics"]), Pose6D.from_dict(d["world_to_cam"]))


def look_at_camera(
    position, target, intrinsics: CameraIntrinsics, up=(0.0, 0.0, 1.0)
) -> CameraModel:
    """Camera at ``position`` with the optical axis through ``target``."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise ValueError("camera position and target coincide")
    r3 = forward / norm
    up = np.asarray(up, dtype=float)
    r1 = np.cross(up, r3)
    if np.linalg.norm(r1) < 1e-12:
        raise ValueError("up direction is parallel to the viewing axis")
    r1 /= np.linalg.norm(r1)
    r2 = np.cross(r3, r1)
    R = np.stack([r1, r2, r3])
    return CameraModel(intrinsics, Pose6D.from_matrix(R, -R @ position))


def project(camera: CameraModel, point) -> np.ndarray:
    """Pinhole projection of one world point; raises behind the camera."""
    pc = camera.world_to_cam.apply(np.asarray(point, dtype=float))
    if pc[2] <= 0:
        raise BehindCameraError(f"point depth {pc[2]:.3f} mm is not in front of the camera")
    intr = camera.intrinsics
    return np.array([intr.fx * pc[0] / pc[2] + intr.cx, intr.fy * pc[1] / pc[2] + intr.cy])


def project_many(camera: CameraModel, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (N,2), depths (N,)) without raising.

    Rows with depth <= 0 hold non-meaningful pixels; callers must mask on
    the returned depths.
    """
    pc = camera.world_to_cam.apply(np.asarray(points, dtype=float))
    z = pc[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    intr = camera.intrinsics
    uv = np.empty((pc.shape[0], 2))
    uv[:, 0] = intr.fx * pc[:, 0] / safe_z + intr.cx
    uv[:, 1] = intr.fy * pc[:, 1] / safe_z + intr.cy
    return uv, z


@dataclass(frozen=True)
class TriangulationResult:
    point: np.ndarray
    ill_conditioned: bool
    sv_ratio: float


def triangulate(observations, cameras) -> TriangulationResult:
    """Linear DLT triangulation of one point from >= 2 views.

    Minimizes algebraic error only; meant to seed the nonlinear fitter.  A
    near-degenerate system (coincident cameras, near-parallel rays) is
    flagged, not raised.
    """
    if len(observations) != len(cameras):
        raise ValueError("one observation per camera required")
    if len(observations) < 2:
        raise InsufficientViewsError("triangulation needs at least two views")
    rows = []
    for uv, cam in zip(observations, cameras):
        uv = np.asarray(uv, dtype=float)
        intr = cam.intrinsics
        # Normalized image coordinates keep row scales comparable.
        xn = (uv[0] - intr.cx) / intr.fx
        yn = (uv[1] - intr.cy) / intr.fy
        R = cam.world_to_cam.matrix()
        t = cam.world_to_cam.translation
        P = np.hstack([R, t[:, None]])
        rows.append(xn * P[2] - P[0])
        rows.append(yn * P[2] - P[1])
    A = np.stack(rows)
    A /= np.maximum(np.linalg.norm(A, axis=1, keepdims=True), 1e-300)
    _, s, Vt = np.linalg.svd(A)
    X = Vt[-1]
    sv_ratio = float(s[2] / s[0]) if s[0] > 0 else 0.0
    ill = sv_ratio < 1e-8 or abs(X[3]) < 1e-12 * np.linalg.norm(X[:3])
    if ill:
        warnings.warn("ill-conditioned triangulation (near-parallel rays)", stacklevel=2)
        point = X[:3] / X[3] if X[3] != 0 else np.full(3, np.nan)
    else:
        point = X[:3] / X[3]
    return TriangulationResult(point=point, ill_conditioned=bool(ill), sv_ratio=sv_ratio)


@dataclass(frozen=True)
class MarkerSpec:
    marker_id: int
    face: int
    corners: np.ndarray              # (4, 3) mm, cube-corner frame, ordered

    def __post_init__(self):
        object.__setattr__(self, "corners", np.asarray(self.corners, dtype=float).reshape(4, 3))


@dataclass(frozen=True)
class MarkerCubeSpec:
    """Cube geometry: 6 faces x 4 markers, corners in the cube-corner frame."""

    edge_mm: float
    markers: tuple

    _SQUARE_TOL = 1e-6

    def __post_init__(self):
        if self.edge_mm <= 0:
            raise ValueError("edge length must be positive")
        markers = tuple(self.markers)
        object.__setattr__(self, "markers", markers)
        if len(markers) != 24:
            raise ValueError(f"cube spec needs 24 markers, got {len(markers)}")
        faces = {}
        ids = set()
        for m in markers:
            faces.setdefault(m.face, 0)
            faces[m.face] += 1
            if m.marker_id in ids:
                raise ValueError(f"duplicate marker id {m.marker_id}")
            ids.add(m.marker_id)
            self._check_square(m)
        if sorted(faces) != list(range(6)) or any(n != 4 for n in faces.values()):
            raise ValueError("markers must cover 6 faces with 4 markers each")
        object.__setattr__(self, "_by_id", {m.marker_id: m for m in markers})

    def _check_square(self, m: MarkerSpec) -> None:
        c = m.corners
        sides = [np.linalg.norm(c[(i + 1) % 4] - c[i]) for i in range(4)]
        if max(sides) - min(sides) > self._SQUARE_TOL:
            raise ValueError(f"marker {m.marker_id} corners do not form a square")
        d1 = np.linalg.norm(c[2] - c[0])
        d2 = np.linalg.norm(c[3] - c[1])
        if abs(d1 - d2) > self._SQUARE_TOL or abs(d1 - sides[0] * np.sqrt(2.0)) > self._SQUARE_TOL:
            raise ValueError(f"marker {m.marker_id} corners do not form a square")
        normal = np.cross(c[1] - c[0], c[3] - c[0])
        if abs(np.dot(c[2] - c[0], normal)) > self._SQUARE_TOL * np.linalg.norm(normal):
            raise ValueError(f"marker {m.marker_id} corners are not coplanar")

    def marker(self, marker_id: int) -> MarkerSpec:
        try:
            return self._by_id[marker_id]
        except KeyError:
            raise MarkerLookupError(f"marker id {marker_id} not in cube spec") from None

    def to_dict(self) -> dict:
        return {
            "edge_mm": self.edge_mm,
            "markers": [
                {"marker_id": m.marker_id, "face": m.face, "corners_mm": m.corners.tolist()}
                for m in self.markers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerCubeSpec":
        markers = tuple(
            MarkerSpec(int(m["marker_id"]), int(m["face"]), np.array(m["corners_mm"]))
            for m in d["markers"]
        )
        return cls(edge_mm=float(d["edge_mm"]), markers=markers)


def default_cube_spec(edge_mm: float = 60.0, marker_side_mm: float = 18.0) -> MarkerCubeSpec:
    """Cube with a 2x2 marker grid per face, ids 0..23.

    The cube occupies [0, edge]^3 in its own corner frame.  Corner order per
    marker is counter-clockwise seen from outside the face.
    """
    if not 0 < 2 * marker_side_mm < edge_mm:
        raise ValueError("two markers plus margins must fit on a face")
    gap = (edge_mm - 2 * marker_side_mm) / 3.0
    # Face frames: (origin, u axis, v axis); outward normal = u x v.
    e = edge_mm
    faces = [
        (np.array([0.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0])),  # z=0
        (np.array([0.0, 0.0, e]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])),    # z=e
        (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])),  # y=0
        (np.array([0.0, e, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 0.0])),    # y=e
        (np.array([0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0])),  # x=0
        (np.array([e, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.0, 1.0])),    # x=e
    ]
    markers = []
    mid = 0
    unit = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    for face_idx, (origin, u, v) in enumerate(faces):
        for row in range(2):
            for col in range(2):
                u0 = gap + col * (marker_side_mm + gap)
                v0 = gap + row * (marker_side_mm + gap)
                corners = np.array(
                    [origin + (u0 + s * marker_side_mm) * u + (v0 + t * marker_side_mm) * v
                     for s, t in unit]
                )
                markers.append(MarkerSpec(mid, face_idx, corners))
                mid += 1
    return MarkerCubeSpec(edge_mm=edge_mm, markers=tuple(markers))


@dataclass(frozen=True)
class MarkerDetection:
    """Output of an external marker detector: ordered corner pixels."""

    marker_id: int
    corners: np.ndarray              # (4, 2) px, same order as the spec corners
    confidence: float = 1.0

    def __post_init__(self):
        corners = np.asarray(self.corners, dtype=float).reshape(4, 2)
        if not np.all(np.isfinite(corners)):
            raise ValueError("detection corners must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must be in [0, 1]")
        object.__setattr__(self, "corners", corners)

    def to_dict(self) -> dict:
        return {
            "marker_id": self.marker_id,
            "corners_px": self.corners.tolist(),
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarkerDetection":
        return cls(int(d["marker_id"]), np.array(d["corners_px"]), float(d.get("confidence", 1.0)))


@dataclass(frozen=True)
class MarkerPoseEstimate:
    """One cube-to-camera pose hypothesis with its source detection."""

    pose: Pose6D
    rms_px: float
    detection: MarkerDetection


def _dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Homography mapping src (N,2) to dst (N,2), Hartley-normalized DLT."""

    def normalizer(pts):
        mean = pts.mean(axis=0)
        scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        T = np.array([[scale, 0.0, -scale * mean[0]],
                      [0.0, scale, -scale * mean[1]],
                      [0.0, 0.0, 1.0]])
        return T

    Ts, Td = normalizer(src), normalizer(dst)
    sh = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    A = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        A.append([-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u])
        A.append([0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v])
    _, _, Vt = np.linalg.svd(np.asarray(A))
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    return H / H[2, 2]


def _corner_triangle_areas(corners: np.ndarray) -> np.ndarray:
    areas = []
    for i in range(4):
        a, b, c = np.delete(corners, i, axis=0)
        u, v = b - a, c - a
        areas.append(0.5 * abs(u[0] * v[1] - u[1] * v[0]))
    return np.asarray(areas)


def estimate_marker_pose(
    detection: MarkerDetection, spec: MarkerCubeSpec, intrinsics: CameraIntrinsics
) -> MarkerPoseEstimate:
    """Cube-to-camera pose from one marker's four ordered corners.

    Planar DLT homography decomposed into a rotation + translation, then
    refined by damped least squares on the corner reprojection error.  The
    correspondence is positional (corner i matches spec corner i), so the
    in-plane square symmetry is already disambiguated by the detector's
    corner ordering.
    """
    marker = spec.marker(detection.marker_id)
    if np.any(_corner_triangle_areas(detection.corners) < 1e-6):
        raise UnstableEstimateError("three detected corners are (nearly) collinear")

    c3d = marker.corners
    origin = c3d[0]
    e1 = c3d[1] - origin
    side = np.linalg.norm(e1)
    e1 = e1 / side
    n = np.cross(c3d[1] - origin, c3d[3] - origin)
    n = n / np.linalg.norm(n)
    e2 = np.cross(n, e1)
    plane2d = (c3d - origin) @ np.column_stack([e1, e2])

    H = _dlt_homography(plane2d, detection.corners)
    M = np.linalg.inv(intrinsics.K()) @ H
    lam = 2.0 / (np.linalg.norm(M[:, 0]) + np.linalg.norm(M[:, 1]))
    r1, r2 = lam * M[:, 0], lam * M[:, 1]
    t = lam * M[:, 2]
    if t[2] < 0:                       # plane must sit in front of the camera
        r1, r2, t = -r1, -r2, -t
    R_approx = np.column_stack([r1, r2, np.cross(r1, r2)])
    U, _, Vt = np.linalg.svd(R_approx)
    R_pc = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt

    B = np.column_stack([e1, e2, n])
    R0 = R_pc @ B.T
    t0 = t - R0 @ origin
    x0 = np.concatenate([matrix_to_rotvec(R0), t0])

    observed = detection.corners.ravel()

    def residual(x):
        R = rotvec_to_matrix(x[:3])
        pc = c3d @ R.T + x[3:]
        z = np.where(pc[:, 2] > 1e-9, pc[:, 2], 1e-9)
        uv = np.column_stack(
            [intrinsics.fx * pc[:, 0] / z + intrinsics.cx,
             intrinsics.fy * pc[:, 1] / z + intrinsics.cy]
        )
        return uv.ravel() - observed

    steps = np.concatenate([np.full(3, 1e-6), np.full(3, 1e-4)])
    res = lm_least_squares(residual, x0, steps, LMOptions(max_iterations=40))
    rms = float(np.sqrt(np.mean(np.sum(res.residual.reshape(4, 2) ** 2, axis=1))))
    pose = Pose6D(res.x[:3], res.x[3:])
    return MarkerPoseEstimate(pose=pose, rms_px=rms, detection=detection)


@dataclass(frozen=True)
class RansacConfig:
    threshold_px: float = 2.0
    iterations: int = 100
    min_inliers: int = 3

    def to_dict(self) -> dict:
        return {
            "threshold_px": self.threshold_px,
            "iterations": self.iterations,
            "min_inliers": self.min_inliers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RansacConfig":
        return cls(
            threshold_px=float(d.get("threshold_px", 2.0)),
            iterations=int(d.get("iterations", 100)),
            min_inliers=int(d.get("min_inliers", 3)),
        )


@dataclass
class ConsensusResult:
    pose: Pose6D
    inlier_indices: list            # indices into the hypothesis list
    inlier_ids: list                # marker ids of the inliers
    rms_px: float                   # refined reprojection RMS over inlier corners


def _corner_errors(pose: Pose6D, detections, spec, intrinsics) -> list:
    """Per-detection max corner reprojection error under ``pose`` (inf if behind)."""
    R = pose.matrix()
    t = pose.translation
    errors = []
    for det in detections:
        c3d = spec.marker(det.marker_id).corners
        pc = c3d @ R.T + t
        if np.any(pc[:, 2] <= 0):
            errors.append(np.inf)
            continue
        uv = np.column_stack(
            [intrinsics.fx * pc[:, 0] / pc[:, 2] + intrinsics.cx,
             intrinsics.fy * pc[:, 1] / pc[:, 2] + intrinsics.cy]
        )
        errors.append(float(np.max(np.linalg.norm(uv - det.corners, axis=1))))
    return errors


def _refine_on_inliers(pose: Pose6D, detections, spec, intrinsics):
    corners3d = np.concatenate([spec.marker(d.marker_id).corners for d in detections])
    observed = np.concatenate([d.corners for d in detections]).ravel()

    def residual(x):
        R = rotvec_to_matrix(x[:3])
        pc = corners3d @ R.T + x[3:]
        z = np.where(pc[:, 2] > 1e-9, pc[:, 2], 1e-9)
        uv = np.column_stack(
            [intrinsics.fx * pc[:, 0] / z + intrinsics.cx,
             intrinsics.fy * pc[:, 1] / z + intrinsics.cy]
        )
        return uv.ravel() - observed

    x0 = np.concatenate([pose.rotvec, pose.translation])
    steps = np.concatenate([np.full(3, 1e-6), np.full(3, 1e-4)])
    res = lm_least_squares(residual, x0, steps, LMOptions(max_iterations=40))
    rms = float(np.sqrt(np.mean(np.sum(res.residual.reshape(-1, 2) ** 2, axis=1))))
    return Pose6D(res.x[:3], res.x[3:]), rms


def ransac_pose_consensus(
    hypotheses: list,
    spec: MarkerCubeSpec,
    intrinsics: CameraIntrinsics,
    config: RansacConfig,
    rng: np.random.Generator,
) -> ConsensusResult:
    """Select the pose hypothesis with maximal marker inlier support.

    Each hypothesis is minimal already (one marker gives a full pose), so
    when the iteration budget covers the hypothesis count every candidate
    is scored, which makes the result independent of input order; larger
    sets are subsampled with the supplied generator.  A detection is an
    inlier when all four of its corners reproject within the pixel
    threshold.  Ties on inlier count are broken by the lower refined RMS,
    then by candidate index.
    """
    if not hypotheses:
        raise ValueError("at least one pose hypothesis is required")
    detections = [h.detection for h in hypotheses]
    n = len(hypotheses)
    if config.iterations >= n:
        candidate_idx = list(range(n))
    else:
        candidate_idx = sorted(rng.choice(n, size=config.iterations, replace=False).tolist())

    scored = []
    for idx in candidate_idx:
        errors = _corner_errors(hypotheses[idx].pose, detections, spec, intrinsics)
        inliers = [i for i, e in enumerate(errors) if e <= config.threshold_px]
        scored.append((idx, inliers))

    best_count = max(len(inl) for _, inl in scored)
    if best_count < config.min_inliers:
        raise NoConsensusError(
            f"best hypothesis has {best_count} inliers, need {config.min_inliers}"
        )

    best = None
    for idx, inliers in scored:
        if len(inliers) != best_count:
            continue
        refined, rms = _refine_on_inliers(
            hypotheses[idx].pose, [detections[i] for i in inliers], spec, intrinsics
        )
        if best is None or rms < best[1] - 1e-15:
            best = (refined, rms, inliers)
    pose, rms, inliers = best
    return ConsensusResult(
        pose=pose,
        inlier_indices=inliers,
        inlier_ids=[detections[i].marker_id for i in inliers],
        rms_px=rms,
    )
