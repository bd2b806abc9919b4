"""Rigid transforms and the gravity-aligned camera convention.

Camera frame: x right, y down, z forward (optical axis).  World and body
frames are z-up.  A body frame sits at the camera center with x forward,
y left, z up, so a gravity-aligned camera is fully described by its
position and yaw.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# camera axes expressed in the body frame (x fwd, y left, z up)
_CAM_IN_BODY = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def wrap_angle(a):
    """Wrap radians to [-pi, pi)."""
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def yaw_of(rotation: np.ndarray) -> float:
    """Heading of the x axis after rotation, in radians."""
    return float(np.arctan2(rotation[1, 0], rotation[0, 0]))


@dataclass(frozen=True)
class Pose:
    """Rigid transform x_world = rotation @ x_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation) -> "Pose":
        return cls(rot_z(yaw), translation)

    @property
    def yaw(self) -> float:
        return yaw_of(self.rotation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply other first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def as_array(self) -> np.ndarray:
        """12 values: row-major rotation followed by translation."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @classmethod
    def from_array(cls, values) -> "Pose":
        v = np.asarray(values, dtype=np.float64)
        return cls(v[:9].reshape(3, 3), v[9:12])


def camera_pose(position, yaw: float) -> Pose:
    """Gravity-aligned camera looking horizontally along heading ``yaw``."""
    return Pose(rot_z(yaw) @ _CAM_IN_BODY, position)


def body_pose(cam: Pose) -> Pose:
    """Gravity-aligned body frame (x forward, z up) of a camera pose."""
    fwd = cam.rotation[:, 2]
    return Pose.from_yaw(float(np.arctan2(fwd[1], fwd[0])), cam.translation)


def is_gravity_aligned(cam: Pose, tol: float = 1e-6) -> bool:
    # camera "up" is -y
    up = -cam.rotation[:, 1]
    return bool(np.allclose(up, [0.0, 0.0, 1.0], atol=tol))
