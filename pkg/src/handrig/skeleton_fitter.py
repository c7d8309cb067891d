"""Levenberg-Marquardt skeleton fitting against weighted multi-view 2D joints.

The objective has two parts: a reprojection term summing, over every view i
and joint k, ``v * w * ||observed_px - projected_px||`` (w is detector
confidence, v the occlusion down-weight from the hand mask), and an
articulation-limit penalty.  The optimizer works on per-term 2-vector
residuals scaled by sqrt(v * w), so its implicit objective is the squared
pixel error, while step acceptance and all reported numbers use the
unsquared sum above; both are exposed.  Only theta and the global pose are
free (26 parameters); finger scales are per-subject constants and stay
frozen at their initial values.

Joints behind a camera or carrying zero confidence contribute exactly zero
residual (and zero Jacobian), so the fit is bit-independent of their pixel
values; behind-camera terms are flagged in the result diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .hand_model import (
    N_JOINTS,
    N_THETA,
    HandParams,
    JointLimits,
    SkeletonTemplate,
    fk_points_raw,
    limit_penalty,
)
from .levenberg import LMOptions, lm_least_squares
from .camera_geometry import CameraModel, triangulate

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERS = "max-iters"
STATUS_REJECTED = "rejected-by-gate"
STATUS_STALLED = "stalled"

_N_FREE = N_THETA + 6          # theta + global pose
_VIS_VALUES = (0.5, 1.0)


class InvalidMaskError(ValueError):
    """Hand-mask polygon is degenerate or self-intersecting."""


@dataclass(frozen=True)
class ViewObservation:
    """Detected 2D joints in one view with per-joint confidence and visibility."""

    view_index: int
    camera: CameraModel
    pixels: np.ndarray               # (21, 2) px
    confidence: np.ndarray           # (21,) in [0, 1]
    visibility: np.ndarray           # (21,) each 0.5 or 1.0
    mask: np.ndarray | None = None   # optional polygon (M, 2) px

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        w = np.asarray(self.confidence, dtype=float)
        v = np.asarray(self.visibility, dtype=float)
        if px.shape != (N_JOINTS, 2) or w.shape != (N_JOINTS,) or v.shape != (N_JOINTS,):
            raise ValueError("observation must carry exactly 21 joint slots")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixels must be finite")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("confidence must lie in [0, 1]")
        if not np.all(np.isin(v, _VIS_VALUES)):
            raise ValueError("visibility weights must be 0.5 or 1.0")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "confidence", w)
        object.__setattr__(self, "visibility", v)
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=float))

    def to_dict(self) -> dict:
        d = {
            "view_index": self.view_index,
            "camera": self.camera.to_dict(),
            "pixels_px": self.pixels.tolist(),
            "confidence": self.confidence.tolist(),
            "visibility": self.visibility.tolist(),
        }
        if self.mask is not None:
            d["mask_px"] = self.mask.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ViewObservation":
        return cls(
            view_index=int(d["view_index"]),
            camera=CameraModel.from_dict(d["camera"]),
            pixels=np.array(d["pixels_px"]),
            confidence=np.array(d["confidence"]),
            visibility=np.array(d["visibility"]),
            mask=np.array(d["mask_px"]) if "mask_px" in d else None,
        )


@dataclass(frozen=True)
class FitConfig:
    """LM hyperparameters and the per-frame acceptance gate."""

    max_iterations: int = 80
    initial_damping: float = 1e-3
    damping_increase: float = 10.0
    damping_decrease: float = 0.3
    loss_tolerance: float = 1e-12
    step_tolerance: float = 1e-12
    penalty_mode: str = "smooth"
    gate_mean_px: float = 15.0       # mean per-joint per-view residual gate

    def __post_init__(self):
        if min(self.max_iterations, self.initial_damping, self.damping_increase,
               self.damping_decrease, self.loss_tolerance, self.step_tolerance,
               self.gate_mean_px) <= 0:
            raise ValueError("fit configuration values must be positive")
        if self.penalty_mode not in ("hard", "smooth"):
            raise ValueError(f"unknown penalty mode {self.penalty_mode!r}")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "initial_damping": self.initial_damping,
            "damping_increase": self.damping_increase,
            "damping_decrease": self.damping_decrease,
            "loss_tolerance": self.loss_tolerance,
            "step_tolerance": self.step_tolerance,
            "penalty_mode": self.penalty_mode,
            "gate_mean_px": self.gate_mean_px,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        defaults = cls()
        return cls(**{
            key: type(getattr(defaults, key))(d.get(key, getattr(defaults, key)))
            for key in defaults.to_dict()
        })


class LossSplit(NamedTuple):
    total: float
    loss_2d: float
    loss_model: float


@dataclass
class FitResult:
    params: HandParams
    total_loss: float
    loss_2d: float
    loss_model: float
    iterations: int
    status: str
    mean_residual_px: float
    residuals_px: np.ndarray         # (views, 21) pixel distance, nan where inactive
    behind_camera: np.ndarray        # (views, 21) bool
    trace: list = field(default_factory=list)

    def to_dict(self) -> dict:
        res = [
            [None if not np.isfinite(r) else float(r) for r in row]
            for row in self.residuals_px
        ]
        return {
            "params": self.params.to_dict(),
            "total_loss": self.total_loss,
            "loss_2d": self.loss_2d,
            "loss_model": self.loss_model,
            "iterations": self.iterations,
            "status": self.status,
            "mean_residual_px": self.mean_residual_px,
            "residuals_px": res,
            "behind_camera": self.behind_camera.astype(bool).tolist(),
            "trace": [float(t) for t in self.trace],
        }


# -- visibility from a hand mask ------------------------------------------

def _segments_properly_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


def _validate_simple_polygon(poly: np.ndarray) -> None:
    n = len(poly)
    if n < 3:
        raise InvalidMaskError("mask polygon needs at least 3 vertices")
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_properly_intersect(a1, a2, poly[j], poly[(j + 1) % n]):
                raise InvalidMaskError("mask polygon is self-intersecting")


def _point_on_boundary(pt, poly, eps=1e-9) -> bool:
    n = len(poly)
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        ab = b - a
        L2 = float(ab @ ab)
        t = 0.0 if L2 == 0 else np.clip(((pt - a) @ ab) / L2, 0.0, 1.0)
        if np.linalg.norm(a + t * ab - pt) <= eps:
            return True
    return False


def _point_in_polygon(pt, poly) -> bool:
    # Even-odd ray casting; boundary handled separately.
    x, y = pt
    inside = False
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if (y1 > y) != (y2 > y):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xint:
                inside = not inside
    return inside


def assign_visibility(joints2d: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-joint visibility weight: 1.0 inside or on the mask, 0.5 outside.

    The boundary counts as inside.  Raises InvalidMaskError for a
    self-intersecting polygon.
    """
    poly = np.asarray(mask, dtype=float)
    _validate_simple_polygon(poly)
    joints2d = np.asarray(joints2d, dtype=float)
    out = np.empty(len(joints2d))
    for i, pt in enumerate(joints2d):
        ok = _point_on_boundary(pt, poly) or _point_in_polygon(pt, poly)
        out[i] = 1.0 if ok else 0.5
    return out


# -- loss evaluation --------------------------------------------------------

class _System:
    """Precomputed per-view camera arrays and weights for fast evaluation."""

    def __init__(self, observations, template, limits, penalty_mode):
        if not observations:
            raise ValueError("at least one view observation is required")
        self.template = template
        self.limits = limits
        self.penalty_mode = penalty_mode
        self.n_views = len(observations)
        self.R = np.stack([o.camera.world_to_cam.matrix() for o in observations])
        self.t = np.stack([o.camera.world_to_cam.translation for o in observations])
        intr = [o.camera.intrinsics for o in observations]
        self.f = np.array([[i.fx, i.fy] for i in intr])
        self.c = np.array([[i.cx, i.cy] for i in intr])
        self.pixels = np.stack([o.pixels for o in observations])
        self.w = np.stack([o.visibility * o.confidence for o in observations])
        self.sqrt_w = np.sqrt(self.w)
        self.active = self.w > 0.0
        self.sqrt_c = np.sqrt(limits.penalty_constant)
        self.m = self.n_views * N_JOINTS * 2 + N_THETA

    def project_all(self, pts):
        """(views, 21, 2) pixels and (views, 21) depths for 21 world points."""
        pc = np.einsum("vij,kj->vki", self.R, pts) + self.t[:, None, :]
        z = pc[:, :, 2]
        safe = np.where(z > 0, z, 1.0)
        uv = pc[:, :, :2] / safe[:, :, None] * self.f[:, None, :] + self.c[:, None, :]
        return uv, z

    def penalty_residuals(self, theta):
        hinge = (np.maximum(0.0, theta - self.limits.upper)
                 + np.maximum(0.0, self.limits.lower - theta))
        if self.penalty_mode == "hard":
            return self.sqrt_c * (hinge > 0.0).astype(float)
        return self.sqrt_c * hinge

    def residuals(self, x, gamma):
        pts = fk_points_raw(x[:N_THETA], gamma, x[N_THETA:], self.template)
        uv, z = self.project_all(pts)
        diff = (uv - self.pixels) * self.sqrt_w[:, :, None]
        diff[(z <= 0) | ~self.active] = 0.0
        out = np.empty(self.m)
        out[: self.n_views * N_JOINTS * 2] = diff.ravel()
        out[-N_THETA:] = self.penalty_residuals(x[:N_THETA])
        return out

    def reported_loss(self, r):
        """Eq-style loss: sum of v*w-weighted pixel norms plus the penalty."""
        blocks = r[: self.n_views * N_JOINTS * 2].reshape(self.n_views, N_JOINTS, 2)
        norms = np.linalg.norm(blocks, axis=2)
        loss_2d = float(np.sum(self.sqrt_w * norms))
        penalty = float(np.sum(r[-N_THETA:] ** 2))
        return loss_2d + penalty

    def pixel_residuals(self, x, gamma):
        """Unweighted per-joint pixel distances (views, 21); nan when inactive."""
        pts = fk_points_raw(x[:N_THETA], gamma, x[N_THETA:], self.template)
        uv, z = self.project_all(pts)
        dist = np.linalg.norm(uv - self.pixels, axis=2)
        behind = z <= 0
        dist[behind | ~self.active] = np.nan
        return dist, behind

    def fd_steps(self):
        steps = np.empty(_N_FREE)
        steps[:N_THETA] = 1e-5           # articulation, rad
        steps[N_THETA:N_THETA + 3] = 1e-3  # translation, mm
        steps[N_THETA + 3:] = 1e-5       # global rotation, rad
        return steps


def _pack(params: HandParams) -> np.ndarray:
    return np.concatenate([params.theta, params.phi])


def _unpack(x: np.ndarray, gamma: np.ndarray) -> HandParams:
    return HandParams(x[:N_THETA].copy(), gamma.copy(), x[N_THETA:].copy())


def reprojection_loss(
    params: HandParams,
    template: SkeletonTemplate,
    observations: list,
) -> float:
    """Weighted sum of pixel distances between detections and projections.

    Terms with zero combined weight or a behind-camera joint contribute 0.
    """
    sys_ = _System(observations, template, JointLimits(np.full(N_THETA, -1e9),
                                                       np.full(N_THETA, 1e9)), "smooth")
    r = sys_.residuals(_pack(params), params.gamma)
    blocks = r[: sys_.n_views * N_JOINTS * 2].reshape(sys_.n_views, N_JOINTS, 2)
    norms = np.linalg.norm(blocks, axis=2)
    return float(np.sum(sys_.sqrt_w * norms))


def total_loss(
    params: HandParams,
    template: SkeletonTemplate,
    observations: list,
    limits: JointLimits,
    mode: str | None = None,
) -> LossSplit:
    """Reprojection loss plus the articulation-limit penalty, with the split."""
    mode = mode or limits.mode
    loss_2d = reprojection_loss(params, template, observations)
    loss_model = limit_penalty(params, limits, mode)
    return LossSplit(loss_2d + loss_model, loss_2d, loss_model)


def fit(
    observations: list,
    template: SkeletonTemplate,
    limits: JointLimits,
    init: HandParams,
    config: FitConfig = FitConfig(),
) -> FitResult:
    """Fit articulation + global pose to the observations by damped least squares.

    Deterministic; accepted steps strictly decrease the reported total loss,
    and the returned trace records that monotone sequence.  The acceptance
    gate compares the mean unweighted per-joint per-view pixel residual
    against ``config.gate_mean_px``; frames above it come back with a
    ``rejected-by-gate`` status and should be dropped or relabelled.
    """
    system = _System(observations, template, limits, config.penalty_mode)
    gamma = init.gamma

    res = lm_least_squares(
        lambda x: system.residuals(x, gamma),
        _pack(init),
        system.fd_steps(),
        LMOptions(
            max_iterations=config.max_iterations,
            initial_damping=config.initial_damping,
            damping_increase=config.damping_increase,
            damping_decrease=config.damping_decrease,
            max_damping=1e12,
            cost_tolerance=config.loss_tolerance,
            step_tolerance=config.step_tolerance,
        ),
        cost_from_residual=system.reported_loss,
    )

    params = _unpack(res.x, gamma)
    loss_2d = reprojection_loss(params, template, observations)
    loss_model = limit_penalty(params, limits, config.penalty_mode)
    dist, behind = system.pixel_residuals(res.x, gamma)
    finite = np.isfinite(dist)
    mean_px = float(np.mean(dist[finite])) if np.any(finite) else np.inf

    status = res.status
    if mean_px > config.gate_mean_px:
        status = STATUS_REJECTED
    return FitResult(
        params=params,
        total_loss=loss_2d + loss_model,
        loss_2d=loss_2d,
        loss_model=loss_model,
        iterations=res.iterations,
        status=status,
        mean_residual_px=mean_px,
        residuals_px=dist,
        behind_camera=behind,
        trace=list(res.trace),
    )


def initial_params(
    observations: list,
    template: SkeletonTemplate,
    limits: JointLimits | None = None,
    min_confidence: float = 0.2,
    gamma: np.ndarray | None = None,
    prefit_iterations: int = 30,
) -> HandParams:
    """Initialization for :func:`fit` from multi-view triangulation.

    Joints seen with enough confidence in >= 2 views are triangulated; the
    rest-pose template is rigidly aligned to them (Kabsch), and a short
    damped least-squares pass in 3D pulls the articulation toward the
    triangulated cloud.  The result is a starting point, not a fit.
    """
    gamma = np.ones(5) if gamma is None else np.asarray(gamma, dtype=float)
    tri_pts = {}
    for k in range(N_JOINTS):
        obs_k = [o.pixels[k] for o in observations if o.confidence[k] >= min_confidence]
        cams_k = [o.camera for o in observations if o.confidence[k] >= min_confidence]
        if len(obs_k) < 2:
            continue
        result = triangulate(obs_k, cams_k)
        if not result.ill_conditioned:
            tri_pts[k] = result.point
    if len(tri_pts) < 3:
        raise ValueError(f"only {len(tri_pts)} joints triangulated; need >= 3 to align")

    idx = np.array(sorted(tri_pts))
    target = np.stack([tri_pts[k] for k in idx])
    rest = template.rest_joints()[idx] * gamma_scale(gamma, idx, template)

    # Kabsch alignment of the rest pose onto the triangulated joints.
    mu_r = rest.mean(axis=0)
    mu_t = target.mean(axis=0)
    H = (rest - mu_r).T @ (target - mu_t)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    t = mu_t - R @ mu_r
    from .rotations import matrix_to_rotvec

    phi = np.concatenate([t, matrix_to_rotvec(R)])
    x = np.concatenate([np.zeros(N_THETA), phi])

    if prefit_iterations > 0:
        lo = limits.lower if limits is not None else np.full(N_THETA, -1e9)
        hi = limits.upper if limits is not None else np.full(N_THETA, 1e9)
        sqrt_c = np.sqrt(limits.penalty_constant) if limits is not None else 0.0

        def residual(xv):
            pts = fk_points_raw(xv[:N_THETA], gamma, xv[N_THETA:], template)
            hinge = np.maximum(0.0, xv[:N_THETA] - hi) + np.maximum(0.0, lo - xv[:N_THETA])
            return np.concatenate([(pts[idx] - target).ravel(), sqrt_c * hinge])

        steps = np.empty(_N_FREE)
        steps[:N_THETA] = 1e-5
        steps[N_THETA:N_THETA + 3] = 1e-3
        steps[N_THETA + 3:] = 1e-5
        res = lm_least_squares(
            residual, x, steps, LMOptions(max_iterations=prefit_iterations)
        )
        x = res.x
    return _unpack(x, gamma)


def gamma_scale(gamma: np.ndarray, joint_idx: np.ndarray, template: SkeletonTemplate):
    """Per-joint scale factors for rest positions under per-finger gamma."""
    factors = np.ones((len(joint_idx), 1))
    for i, j in enumerate(joint_idx):
        f = template.finger_of_joint[j]
        if f >= 0:
            factors[i, 0] = gamma[f]
    return factors


def check_gradient(
    params: HandParams,
    template: SkeletonTemplate,
    observations: list,
    limits: JointLimits,
    fd_scale: float = 0.5,
) -> float:
    """Relative mismatch between the fitter's gradient and independent FD.

    Assembles the gradient of the reported total loss from the same
    finite-difference residual Jacobian the optimizer uses, then compares
    against central differences of the scalar loss taken at ``fd_scale``
    times the fitter's step sizes.  Terms with (near-)zero pixel residual
    are excluded: the pixel norm is not differentiable at zero.  Requires
    the smooth penalty mode and all joints in front of every camera.
    """
    if limits.mode != "smooth":
        raise ValueError("gradient check requires the smooth penalty mode")
    system = _System(observations, template, limits, "smooth")
    x = _pack(params)
    gamma = params.gamma
    _, z = system.project_all(fk_points_raw(params.theta, gamma, params.phi, template))
    if np.any(z <= 0):
        raise ValueError("gradient check requires all joints in front of all cameras")

    from .levenberg import fd_jacobian

    steps = system.fd_steps()
    r = system.residuals(x, gamma)
    J = fd_jacobian(lambda xv: system.residuals(xv, gamma), x, steps)

    n2d = system.n_views * N_JOINTS * 2
    blocks = r[:n2d].reshape(-1, 2)
    norms = np.linalg.norm(blocks, axis=1)
    sqrt_w = system.sqrt_w.ravel()
    grad = np.zeros(_N_FREE)
    for term in range(blocks.shape[0]):
        if norms[term] < 1e-12:
            continue
        Jt = J[2 * term: 2 * term + 2, :]
        grad += sqrt_w[term] * (Jt.T @ blocks[term]) / norms[term]
    grad += 2.0 * J[n2d:, :].T @ r[n2d:]

    def scalar_loss(xv):
        return system.reported_loss(system.residuals(xv, gamma))

    fd = np.empty(_N_FREE)
    for i in range(_N_FREE):
        h = steps[i] * fd_scale
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        fd[i] = (scalar_loss(xp) - scalar_loss(xm)) / (2.0 * h)

    scale = max(np.max(np.abs(grad)), np.max(np.abs(fd)), 1e-300)
    return float(np.max(np.abs(grad - fd)) / scale)
