"""Pinhole camera, rigid pose and depth map containers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    baseline: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, points_cam: np.ndarray):
        """Continuous pixel coordinates ``(u, v)`` of camera-frame points."""
        z = points_cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * points_cam[..., 0] / z + self.cx
            v = self.fy * points_cam[..., 1] / z + self.cy
        return u, v

    def pixel_rays(self) -> np.ndarray:
        """``(H, W, 3)`` camera-frame rays through pixel centers with z = 1."""
        u, v = np.meshgrid(np.arange(self.width, dtype=np.float64), np.arange(self.height, dtype=np.float64))
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True)
class Pose:
    """Camera-to-global rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``eye`` with optical axis (+z) toward ``target``; image y points down."""
        eye = np.asarray(eye, np.float64)
        z = np.asarray(target, np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, np.float64))
        if np.linalg.norm(x) < 1e-9:
            raise ValueError("viewing direction parallel to up vector")
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(np.stack([x, y, z], axis=1), eye)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_rigid(self, tol: float = 1e-6) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)

    def validate(self, tol: float = 1e-6) -> None:
        if not self.is_rigid(tol):
            raise ValueError("pose rotation is not orthonormal with det +1")
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("pose translation is not finite")

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return points_cam @ self.rotation.T + self.translation

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return (points_world - self.translation) @ self.rotation

    def compose(self, other: "Pose") -> "Pose":
        """``self * other`` (apply ``other`` first)."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


@dataclass
class DepthMap:
    """Metric z-depth per pixel; NaN marks invalid pixels."""

    depths: np.ndarray

    def __post_init__(self):
        d = np.array(self.depths, dtype=np.float64)
        d[~np.isfinite(d) | (d <= 0)] = np.nan
        self.depths = d

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depths)

    def matches(self, cam: CameraModel) -> bool:
        return self.depths.shape == (cam.height, cam.width)
