"""Axis-angle rotation helpers shared by the kinematics and camera code.

All rotations are represented as axis-angle 3-vectors (rotation vector:
direction = axis, norm = angle in radians).  Conversions use the Rodrigues
formula with series fallbacks near zero angle so finite differencing across
the identity stays smooth.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotvec_to_matrix(rotvec: np.ndarray) -> np.ndarray:
    """Rodrigues: axis-angle 3-vector to a 3x3 rotation matrix."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = float(np.linalg.norm(rotvec))
    K = skew(rotvec)
    if angle < _SMALL_ANGLE:
        # 2nd-order series in the full rotation vector; exact enough at
        # angle < 1e-8 and smooth through zero.
        return np.eye(3) + K + 0.5 * (K @ K)
    s = np.sin(angle) / angle
    c = (1.0 - np.cos(angle)) / (angle * angle)
    return np.eye(3) + s * K + c * (K @ K)


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation about a fixed unit axis; cheaper than rotvec_to_matrix."""
    c = np.cos(angle)
    s = np.sin(angle)
    K = skew(axis)
    return np.eye(3) * c + s * K + (1.0 - c) * np.outer(axis, axis)


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues; returns the canonical axis-angle with angle in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = float(np.arccos(cos_angle))
    if angle < _SMALL_ANGLE:
        # First-order: rotvec ~ vee(R - R^T) / 2
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - angle < 1e-6:
        # Near pi the off-diagonal vee is ill-conditioned; take the axis from
        # the dominant column of R + I.
        B = (R + np.eye(3)) / 2.0
        col = int(np.argmax(np.diag(B)))
        axis = B[:, col] / np.sqrt(max(B[col, col], 1e-300))
        axis = axis / np.linalg.norm(axis)
        # Fix sign using the vee part (zero exactly at pi, where sign is moot).
        vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        if np.dot(axis, vee) < 0:
            axis = -axis
        return axis * angle
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return vee * (angle / (2.0 * np.sin(angle)))


def rotation_angle_between(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic angle (radians) between two rotation matrices."""
    cos_angle = np.clip((np.trace(Ra @ Rb.T) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos_angle))
