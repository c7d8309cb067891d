"""Forward-kinematics hand skeleton.

The hand is parameterized by three blocks:

* ``theta`` (20): articulation angles in radians.  Four per finger, in the
  order [base abduction, base flexion, mid flexion, distal flexion].  Finger
  order is thumb, index, middle, ring, pinky, so ``theta[4*f + k]`` is DOF
  ``k`` of finger ``f``.  The thumb's chain reads CMC / MCP / IP / TIP, the
  other fingers MCP / PIP / DIP / TIP.
* ``gamma`` (5): per-finger length scales multiplying every segment of that
  finger's chain (including the metacarpal).  Constant per subject.
* ``phi`` (6): global pose; ``phi[0:3]`` is the wrist translation in mm,
  ``phi[3:6]`` the global rotation as an axis-angle vector.

Joint ordering follows the common 21-keypoint convention: wrist = 0, then
four joints per finger (thumb 1-4, index 5-8, middle 9-12, ring 13-16,
pinky 17-20).  A DOF rotates the segment *leaving* its joint, so base DOFs
move the mid/distal/tip joints but never the base joint itself.

The default rest-pose segment lengths (average adult male hand) and the
articulation limit table ship as ``data/default_hand.json``; any file with
the same schema can replace them.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .jsonio import load_json
from .rotations import rotvec_to_matrix

N_JOINTS = 21
N_THETA = 20
N_FINGERS = 5
N_PHI = 6

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

JOINT_NAMES = (
    "wrist",
    "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
    "index_mcp", "index_pip", "index_dip", "index_tip",
    "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
    "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
    "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip",
)

# Tree: wrist roots each finger chain base; chains are sequential.
PARENTS = (-1,) + tuple(
    0 if k == 0 else 4 * f + k for f in range(N_FINGERS) for k in range(4)
)

FINGER_OF_JOINT = (-1,) + tuple(f for f in range(N_FINGERS) for _ in range(4))

# DOFs attached to each chain position (base, mid, distal, tip); a DOF
# rotates every segment below its joint.
_DOFS_AT_STEP = ((0, 1), (2,), (3,), ())

# Joints whose position depends on theta[d]: the strict subtree below the
# joint carrying DOF d.
DOF_SUBTREE = tuple(
    tuple(range(1 + 4 * (d // 4) + (1 if d % 4 <= 1 else d % 4), 1 + 4 * (d // 4) + 4))
    for d in range(N_THETA)
)

_DOF_NAMES = ("abduction", "base_flexion", "mid_flexion", "distal_flexion")
DOF_NAMES = tuple(
    f"{FINGER_NAMES[d // 4]}_{_DOF_NAMES[d % 4]}" for d in range(N_THETA)
)


class DimensionError(ValueError):
    """Input array has the wrong shape for the operation."""


def _as_array(value, shape, name) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class HandParams:
    """Full hand configuration (theta, gamma, phi)."""

    theta: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", _as_array(self.theta, (N_THETA,), "theta"))
        object.__setattr__(self, "gamma", _as_array(self.gamma, (N_FINGERS,), "gamma"))
        object.__setattr__(self, "phi", _as_array(self.phi, (N_PHI,), "phi"))
        if np.any(self.gamma <= 0):
            raise ValueError("gamma entries must be positive")

    @classmethod
    def rest(cls) -> "HandParams":
        return cls(np.zeros(N_THETA), np.ones(N_FINGERS), np.zeros(N_PHI))

    @property
    def translation(self) -> np.ndarray:
        return self.phi[0:3]

    @property
    def rotvec(self) -> np.ndarray:
        return self.phi[3:6]

    def with_phi(self, phi) -> "HandParams":
        return replace(self, phi=np.asarray(phi, dtype=float))

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "gamma": self.gamma.tolist(),
            "phi": self.phi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HandParams":
        return cls(np.array(d["theta"]), np.array(d["gamma"]), np.array(d["phi"]))


@dataclass(frozen=True)
class SkeletonTemplate:
    """Rest-pose skeleton: per-joint offsets from parent plus DOF axes.

    ``rest_offsets`` are in the wrist frame (mm); ``dof_axes`` are unit
    vectors in the frame of the chain at rest.
    """

    rest_offsets: np.ndarray           # (21, 3) mm; wrist row is zero
    dof_axes: np.ndarray               # (20, 3) unit
    joint_names: tuple = JOINT_NAMES
    parents: tuple = PARENTS
    finger_of_joint: tuple = FINGER_OF_JOINT

    def __post_init__(self):
        object.__setattr__(
            self, "rest_offsets", _as_array(self.rest_offsets, (N_JOINTS, 3), "rest_offsets")
        )
        object.__setattr__(self, "dof_axes", _as_array(self.dof_axes, (N_THETA, 3), "dof_axes"))
        if tuple(self.parents) != PARENTS:
            raise ValueError("parents must follow the fixed wrist-rooted chain convention")
        if tuple(self.finger_of_joint) != FINGER_OF_JOINT:
            raise ValueError("finger_of_joint must follow the fixed joint convention")
        lengths = np.linalg.norm(self.rest_offsets[1:], axis=1)
        if np.any(lengths <= 0):
            raise ValueError("all segment lengths must be positive")
        norms = np.linalg.norm(self.dof_axes, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("dof_axes must be unit vectors")
        # Cached skew and outer-product matrices per DOF axis; fk_points_raw
        # builds all 20 DOF rotations in one vectorized Rodrigues pass.
        K = np.zeros((N_THETA, 3, 3))
        a = self.dof_axes
        K[:, 0, 1] = -a[:, 2]; K[:, 0, 2] = a[:, 1]
        K[:, 1, 0] = a[:, 2]; K[:, 1, 2] = -a[:, 0]
        K[:, 2, 0] = -a[:, 1]; K[:, 2, 1] = a[:, 0]
        object.__setattr__(self, "_axes_skew", K)
        object.__setattr__(self, "_axes_outer", np.einsum("di,dj->dij", a, a))

    def segment_lengths(self) -> np.ndarray:
        """Length of the segment ending at each joint; wrist entry is 0."""
        return np.linalg.norm(self.rest_offsets, axis=1)

    def rest_joints(self) -> np.ndarray:
        """Joint positions at the identity configuration (21, 3)."""
        pts = np.zeros((N_JOINTS, 3))
        for j in range(1, N_JOINTS):
            pts[j] = pts[self.parents[j]] + self.rest_offsets[j]
        return pts

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "finger_of_joint": list(self.finger_of_joint),
            "rest_offsets_mm": self.rest_offsets.tolist(),
            "dof_axes": self.dof_axes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletonTemplate":
        return cls(
            rest_offsets=np.array(d["rest_offsets_mm"]),
            dof_axes=np.array(d["dof_axes"]),
            joint_names=tuple(d.get("joint_names", JOINT_NAMES)),
            parents=tuple(d.get("parents", PARENTS)),
            finger_of_joint=tuple(d.get("finger_of_joint", FINGER_OF_JOINT)),
        )


@dataclass(frozen=True)
class JointLimits:
    """Per-DOF articulation bounds and the out-of-bounds penalty settings.

    ``mode`` selects how :func:`limit_penalty` scores violations: ``hard``
    adds a flat ``penalty_constant`` per violated DOF; ``smooth`` scores
    ``penalty_constant * hinge**2`` so the fitter has a usable gradient.
    """

    lower: np.ndarray
    upper: np.ndarray
    penalty_constant: float = 100.0
    mode: str = "smooth"

    def __post_init__(self):
        object.__setattr__(self, "lower", _as_array(self.lower, (N_THETA,), "lower"))
        object.__setattr__(self, "upper", _as_array(self.upper, (N_THETA,), "upper"))
        if np.any(self.lower >= self.upper):
            raise ValueError("lower bounds must be strictly below upper bounds")
        if self.penalty_constant <= 0:
            raise ValueError("penalty_constant must be positive")
        if self.mode not in ("hard", "smooth"):
            raise ValueError(f"unknown penalty mode {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "lower_rad": self.lower.tolist(),
            "upper_rad": self.upper.tolist(),
            "penalty_constant": self.penalty_constant,
            "penalty_mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointLimits":
        return cls(
            lower=np.array(d["lower_rad"]),
            upper=np.array(d["upper_rad"]),
            penalty_constant=float(d.get("penalty_constant", 100.0)),
            mode=str(d.get("penalty_mode", "smooth")),
        )


@dataclass(frozen=True)
class JointSet3D:
    """21 labelled 3-d joints with the frame they live in."""

    points: np.ndarray                 # (21, 3) mm
    frame: str = "world"

    def __post_init__(self):
        object.__setattr__(self, "points", _as_array(self.points, (N_JOINTS, 3), "points"))


_EYE3 = np.eye(3)


def fk_points_raw(
    theta: np.ndarray, gamma: np.ndarray, phi: np.ndarray, template: SkeletonTemplate
) -> np.ndarray:
    """FK on raw parameter arrays, skipping HandParams validation.

    This is the fitter's inner loop; shapes are assumed correct.
    """
    R_global = rotvec_to_matrix(phi[3:6])
    t = phi[0:3]
    c = np.cos(theta)
    s = np.sin(theta)
    Rd = (
        c[:, None, None] * _EYE3
        + s[:, None, None] * template._axes_skew
        + (1.0 - c)[:, None, None] * template._axes_outer
    )
    pts = np.empty((N_JOINTS, 3))
    pts[0] = t
    offsets = template.rest_offsets
    for f in range(N_FINGERS):
        g = gamma[f]
        d = 4 * f
        base = 1 + d
        pos = t + g * (R_global @ offsets[base])
        pts[base] = pos
        R = R_global @ Rd[d] @ Rd[d + 1]
        pos = pos + g * (R @ offsets[base + 1])
        pts[base + 1] = pos
        R = R @ Rd[d + 2]
        pos = pos + g * (R @ offsets[base + 2])
        pts[base + 2] = pos
        R = R @ Rd[d + 3]
        pts[base + 3] = pos + g * (R @ offsets[base + 3])
    return pts


def fk_points(params: HandParams, template: SkeletonTemplate) -> np.ndarray:
    """Joint positions (21, 3) in mm; the hot path behind forward_kinematics."""
    return fk_points_raw(params.theta, params.gamma, params.phi, template)


def forward_kinematics(params: HandParams, template: SkeletonTemplate) -> JointSet3D:
    """Evaluate the skeleton at ``params``; returns world-frame joints."""
    return JointSet3D(fk_points(params, template), frame="world")


def hinge_violations(params: HandParams, limits: JointLimits) -> np.ndarray:
    """Per-DOF distance beyond the violated bound (0 inside the interval)."""
    theta = params.theta
    return np.maximum(0.0, theta - limits.upper) + np.maximum(0.0, limits.lower - theta)


def limit_penalty(params: HandParams, limits: JointLimits, mode: str | None = None) -> float:
    """Out-of-bounds articulation penalty.

    Hard mode counts violated DOFs at a flat constant each; smooth mode sums
    squared hinge distances, which is continuously differentiable inside each
    bound region and is what the fitter differentiates.
    """
    if mode is None:
        mode = limits.mode
    hinges = hinge_violations(params, limits)
    if mode == "hard":
        return float(limits.penalty_constant * np.count_nonzero(hinges > 0.0))
    if mode == "smooth":
        return float(limits.penalty_constant * np.sum(hinges**2))
    raise ValueError(f"unknown penalty mode {mode!r}")


def validate_limits(params: HandParams, limits: JointLimits) -> list[int]:
    """Indices of DOFs outside [lower, upper], ascending; empty iff hard penalty is 0."""
    hinges = hinge_violations(params, limits)
    return np.flatnonzero(hinges > 0.0).tolist()


def load_hand_file(path) -> tuple[SkeletonTemplate, JointLimits]:
    """Load a template + limits pair from a hand-definition JSON file."""
    d = load_json(path)
    return SkeletonTemplate.from_dict(d["template"]), JointLimits.from_dict(d["limits"])


def _default_hand() -> tuple[SkeletonTemplate, JointLimits]:
    with resources.as_file(resources.files("handrig.data") / "default_hand.json") as p:
        return load_hand_file(p)


def default_template() -> SkeletonTemplate:
    return _default_hand()[0]


def default_limits() -> JointLimits:
    return _default_hand()[1]
