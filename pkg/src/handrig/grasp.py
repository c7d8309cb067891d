"""Grasp-taxonomy prototypes and synthetic classification datasets.

One canonical articulation per grasp class.  The 17-class taxonomy
(Cutkosky) is hand-authored below as per-finger [abduction, base, mid,
distal] flexion rows; the 33-class taxonomy (Feix) keeps the named classes
but derives well-separated prototype articulations deterministically inside
the limit table, since authoring 33 anatomically exact grasps adds nothing
at this scale.  Training samples are prototypes plus Gaussian articulation
noise, run through FK and pose normalization.
"""

from __future__ import annotations

import numpy as np

from .hand_model import (
    N_THETA,
    HandParams,
    JointLimits,
    SkeletonTemplate,
    fk_points,
)
from .mlp import preprocess_pose

CUTKOSKY_17 = (
    "large_diameter", "small_diameter", "medium_wrap", "adducted_thumb",
    "light_tool", "prismatic_4_finger", "prismatic_3_finger",
    "prismatic_2_finger", "disk_power", "sphere_power", "disk_precision",
    "sphere_precision", "tripod", "platform", "lateral_pinch",
    "index_extension", "fixed_hook",
)

FEIX_33 = (
    "large_diameter", "small_diameter", "medium_wrap", "adducted_thumb",
    "light_tool", "prismatic_4_finger", "prismatic_3_finger",
    "prismatic_2_finger", "palmar_pinch", "power_disk", "power_sphere",
    "precision_disk", "precision_sphere", "tripod", "fixed_hook", "lateral",
    "index_finger_extension", "extension_type", "distal_type",
    "writing_tripod", "tripod_variation", "parallel_extension",
    "adduction_grip", "tip_pinch", "lateral_tripod", "sphere_4_finger",
    "quadpod", "sphere_3_finger", "stick", "palmar", "ring", "ventral",
    "inferior_pincer",
)

# Per class: thumb row then index/middle/ring/pinky rows, each
# [abduction, base flexion, mid flexion, distal flexion] in radians.
_CURL = (0.0, 1.45, 1.65, 1.05)      # fully curled finger
_STRAIGHT = (0.0, 0.05, 0.05, 0.05)

_PROTO_17 = {
    "large_diameter": [(0.30, 0.50, 0.50, 0.40)] + [(0.0, 0.90, 0.90, 0.60)] * 4,
    "small_diameter": [(0.35, 0.70, 0.80, 0.70)] + [(0.0, 1.30, 1.40, 0.90)] * 4,
    "medium_wrap": [(0.20, 0.60, 0.60, 0.50)] + [(0.0, 1.10, 1.10, 0.80)] * 4,
    "adducted_thumb": [(-0.30, 0.30, 0.40, 0.30)] + [(0.0, 1.00, 1.00, 0.70)] * 4,
    "light_tool": [(-0.15, 0.15, 0.70, 0.60)] + [(0.0, 1.25, 1.25, 0.85)] * 4,
    "prismatic_4_finger": [(0.50, 0.55, 0.50, 0.45)] + [(0.0, 0.70, 0.60, 0.40)] * 4,
    "prismatic_3_finger": [(0.50, 0.50, 0.50, 0.45)]
    + [(0.0, 0.70, 0.60, 0.40)] * 2 + [_CURL] * 2,
    "prismatic_2_finger": [(0.50, 0.55, 0.55, 0.50)]
    + [(0.0, 0.75, 0.65, 0.45)] + [_CURL] * 3,
    "disk_power": [(0.30, 0.40, 0.50, 0.40),
                   (0.30, 0.70, 0.70, 0.55), (0.10, 0.70, 0.70, 0.55),
                   (-0.10, 0.70, 0.70, 0.55), (-0.30, 0.70, 0.70, 0.55)],
    "sphere_power": [(0.35, 0.45, 0.55, 0.50),
                     (0.33, 0.85, 0.85, 0.65), (0.11, 0.85, 0.85, 0.65),
                     (-0.11, 0.85, 0.85, 0.65), (-0.33, 0.85, 0.85, 0.65)],
    "disk_precision": [(0.50, 0.45, 0.40, 0.35),
                       (0.28, 0.55, 0.45, 0.35), (0.09, 0.55, 0.45, 0.35),
                       (-0.09, 0.55, 0.45, 0.35), (-0.28, 0.55, 0.45, 0.35)],
    "sphere_precision": [(0.50, 0.50, 0.45, 0.40),
                         (0.30, 0.62, 0.55, 0.40), (0.10, 0.62, 0.55, 0.40),
                         (-0.10, 0.62, 0.55, 0.40), (-0.30, 0.62, 0.55, 0.40)],
    "tripod": [(0.45, 0.50, 0.50, 0.45)]
    + [(0.0, 0.65, 0.55, 0.40)] * 2 + [_CURL] * 2,
    "platform": [(0.10, 0.10, 0.10, 0.10)] + [_STRAIGHT] * 4,
    "lateral_pinch": [(-0.10, 0.45, 0.35, 0.30)] + [(0.0, 1.20, 1.30, 0.90)] * 4,
    "index_extension": [(0.25, 0.60, 0.60, 0.50)] + [_STRAIGHT] + [_CURL] * 3,
    "fixed_hook": [(0.00, 0.05, 0.10, 0.10)] + [(0.0, 0.60, 1.50, 1.20)] * 4,
}


def _theta_from_rows(rows) -> np.ndarray:
    theta = np.empty(N_THETA)
    for f, row in enumerate(rows):
        theta[4 * f: 4 * f + 4] = row
    return theta


def prototype_params(num_classes: int, limits: JointLimits) -> list:
    """One canonical HandParams per grasp class (identity global pose)."""
    if num_classes == 17:
        thetas = [_theta_from_rows(_PROTO_17[name]) for name in CUTKOSKY_17]
    elif num_classes == 33:
        thetas = _derived_prototypes(33, limits)
    else:
        raise ValueError("supported taxonomies: 17 (Cutkosky) or 33 (Feix)")
    zeros = np.zeros(6)
    ones = np.ones(5)
    out = []
    for theta in thetas:
        theta = np.clip(theta, limits.lower + 0.01, limits.upper - 0.01)
        out.append(HandParams(theta, ones, zeros))
    return out


def _derived_prototypes(count: int, limits: JointLimits, min_sep: float = 1.2) -> list:
    """Deterministic well-separated articulations inside the limit box."""
    rng = np.random.default_rng(20240 + count)
    lo = limits.lower + 0.1 * (limits.upper - limits.lower)
    hi = limits.upper - 0.1 * (limits.upper - limits.lower)
    protos = []
    while len(protos) < count:
        cand = rng.uniform(lo, hi)
        if all(np.linalg.norm(cand - p) >= min_sep for p in protos):
            protos.append(cand)
    return protos


def class_names(num_classes: int) -> tuple:
    if num_classes == 17:
        return CUTKOSKY_17
    if num_classes == 33:
        return FEIX_33
    raise ValueError("supported taxonomies: 17 (Cutkosky) or 33 (Feix)")


def make_grasp_dataset(
    num_classes: int,
    samples_per_class: int,
    noise_rad: float,
    template: SkeletonTemplate,
    limits: JointLimits,
    rng: np.random.Generator,
):
    """Sampled poses around each prototype -> (features (N, 63), labels (N,)).

    Features are preprocess_pose(FK(prototype + articulation noise)).
    """
    protos = prototype_params(num_classes, limits)
    features = []
    labels = []
    for cls_id, proto in enumerate(protos):
        for _ in range(samples_per_class):
            theta = proto.theta + noise_rad * rng.standard_normal(N_THETA)
            params = HandParams(theta, proto.gamma, proto.phi)
            features.append(preprocess_pose(fk_points(params, template)))
            labels.append(cls_id)
    return np.stack(features), np.asarray(labels, dtype=int)
