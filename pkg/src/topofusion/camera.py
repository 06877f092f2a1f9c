"""Pinhole cameras and per-camera image buffers."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CameraModel:
    """Pinhole camera; ``pose`` maps world to camera coordinates.

    Camera frame: x right, y down, z along the optical axis.  Pixel ``(u, v)``
    has its centre at integer coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))
    name: str = ""

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=float).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("camera resolution must be at least 1x1")
        self.width, self.height = int(self.width), int(self.height)

    @classmethod
    def look_at(cls, eye, target, fx, fy, width, height, up=(0.0, 0.0, 1.0), cx=None, cy=None, name=""):
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        pose = np.eye(4)
        pose[:3, :3] = np.stack([x, y, z])
        pose[:3, 3] = -pose[:3, :3] @ eye
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, width, height, pose, name)

    @property
    def rotation(self):
        return self.pose[:3, :3]

    @property
    def translation(self):
        return self.pose[:3, 3]

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    def to_camera(self, pts):
        return np.asarray(pts, dtype=float) @ self.rotation.T + self.translation

    def project(self, pts):
        """World points -> (u, v, z) with continuous pixel coordinates."""
        pc = self.to_camera(pts)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z

    def pixel_rays(self):
        """Unit world-space ray directions, shape (H, W, 3), and the origin."""
        vv, uu = np.mgrid[0:self.height, 0:self.width].astype(float)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return d @ self.rotation, self.center

    def pixel_dirs_camera(self):
        """Camera-frame directions with unit z (depth scaling), shape (H, W, 3)."""
        vv, uu = np.mgrid[0:self.height, 0:self.width].astype(float)
        return np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1)

    def intrinsics(self):
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=float)

    def to_dict(self):
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height, "pose": self.pose.tolist()}


@dataclass
class DepthMap:
    """Depth in metres (0 = invalid), camera-frame normals, colour payload."""

    depth: np.ndarray
    normal: np.ndarray
    color: np.ndarray = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.normal = np.asarray(self.normal, dtype=float)
        if self.color is None:
            self.color = np.zeros(self.depth.shape + (3,))

    @property
    def valid(self):
        return self.depth > 0

    def copy(self):
        return DepthMap(self.depth.copy(), self.normal.copy(), self.color.copy())

    def points_camera(self, cam):
        return cam.pixel_dirs_camera() * self.depth[..., None]

    def points_world(self, cam):
        pc = self.points_camera(cam)
        return (pc - cam.translation) @ cam.rotation
