"""Small SO(3) toolbox: axis-angle, ZYX Euler angles, re-orthonormalization.

Conventions: right-handed frames, ZYX (yaw-pitch-roll) Euler composition
R = Rz(yaw) @ Ry(pitch) @ Rx(roll), angles in radians.
"""

from __future__ import annotations

import numpy as np


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def from_ypr(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation matrix from ZYX Euler angles."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def to_ypr(rot: np.ndarray) -> tuple[float, float, float]:
    """ZYX Euler angles (yaw, pitch, roll) of a rotation matrix.

    Pitch is taken in [-pi/2, pi/2]; at gimbal lock the roll is folded
    into yaw.
    """
    pitch = np.arcsin(np.clip(-rot[2, 0], -1.0, 1.0))
    if abs(rot[2, 0]) < 1.0 - 1e-12:
        yaw = np.arctan2(rot[1, 0], rot[0, 0])
        roll = np.arctan2(rot[2, 1], rot[2, 2])
    else:
        yaw = np.arctan2(-rot[0, 1], rot[1, 1])
        roll = 0.0
    return float(yaw), float(pitch), float(roll)


def axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    k = axis / np.linalg.norm(axis)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def rotation_angle(rot: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(rot) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def orthonormalize(rot: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (polar decomposition)."""
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def is_rotation(rot: np.ndarray, tol: float = 1e-9) -> bool:
    return (
        rot.shape == (3, 3)
        and np.linalg.norm(rot.T @ rot - np.eye(3)) < tol
        and abs(np.linalg.det(rot) - 1.0) < tol
    )
