"""Pinhole camera rig around the ego vehicle.

Ego frame: x forward, y left, z up, origin on the ground under the rear axle.
Camera frame: x right, y down, z along the optical axis. Pixel (u, v) has its
centre at integer coordinates, so the principal point (W/2, H/2) is a pixel
centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

IMG_H, IMG_W = 32, 56
FOV_DEG = 64.0
MOUNT_HEIGHT = 1.5

# name -> yaw in degrees (counter-clockwise from forward)
CAMERA_YAWS = {
    "front-left": 55.0,
    "front": 0.0,
    "front-right": -55.0,
    "back-left": 125.0,
    "back": 180.0,
    "back-right": -125.0,
}
CAMERA_NAMES = tuple(CAMERA_YAWS)


@dataclass(frozen=True)
class Camera:
    name: str
    K: np.ndarray          # 3x3 intrinsics
    T: np.ndarray          # 4x4 ego -> camera
    height: int = IMG_H
    width: int = IMG_W

    def __post_init__(self):
        K = np.asarray(self.K, np.float64)
        T = np.asarray(self.T, np.float64)
        if K[1, 0] or K[2, 0] or K[2, 1] or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("K must be upper triangular with positive focal lengths")
        R = T[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)

    @property
    def cam_to_ego(self) -> np.ndarray:
        return np.linalg.inv(self.T)

    def project(self, pts_ego: np.ndarray) -> np.ndarray:
        """Ego points [N, 3] -> [N, 3] of (u, v, camera-frame depth)."""
        pc = pts_ego @ self.T[:3, :3].T + self.T[:3, 3]
        p = pc @ self.K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.stack([p[:, 0] / p[:, 2], p[:, 1] / p[:, 2], pc[:, 2]], axis=1)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Origin [3] and unit directions [H, W, 3] in the ego frame, one per pixel centre."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        pix = np.stack([u, v, np.ones_like(u)], axis=-1).astype(np.float64)
        d_cam = pix @ np.linalg.inv(self.K).T
        c2e = self.cam_to_ego
        d = d_cam @ c2e[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return c2e[:3, 3].copy(), d


def intrinsics(width: int = IMG_W, height: int = IMG_H, fov_deg: float = FOV_DEG) -> np.ndarray:
    f = (width / 2) / math.tan(math.radians(fov_deg) / 2)
    return np.array([[f, 0, width / 2], [0, f, height / 2], [0, 0, 1]], np.float64)


def extrinsics(yaw_deg: float, height: float = MOUNT_HEIGHT) -> np.ndarray:
    """Ego -> camera transform for a level camera yawed by ``yaw_deg``."""
    psi = math.radians(yaw_deg)
    fwd = np.array([math.cos(psi), math.sin(psi), 0.0])
    right = np.array([math.sin(psi), -math.cos(psi), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    c2e = np.eye(4)
    c2e[:3, :3] = np.stack([right, down, fwd], axis=1)
    c2e[:3, 3] = (0.0, 0.0, height)
    e2c = np.eye(4)
    e2c[:3, :3] = c2e[:3, :3].T
    e2c[:3, 3] = -c2e[:3, :3].T @ c2e[:3, 3]
    return e2c


@dataclass(frozen=True)
class CameraRig:
    cameras: tuple

    def __getitem__(self, name: str) -> Camera:
        for cam in self.cameras:
            if cam.name == name:
                return cam
        raise KeyError(f"no camera named {name!r}")

    def __iter__(self):
        return iter(self.cameras)

    @property
    def names(self):
        return tuple(c.name for c in self.cameras)

    def rotated(self, name: str, yaw_deg: float) -> "CameraRig":
        """Copy of the rig with one camera yawed about the ego z axis."""
        psi = math.radians(yaw_deg)
        rz = np.eye(4)
        rz[:2, :2] = [[math.cos(psi), -math.sin(psi)], [math.sin(psi), math.cos(psi)]]
        cams = tuple(replace(c, T=c.T @ np.linalg.inv(rz)) if c.name == name else c
                     for c in self.cameras)
        return CameraRig(cams)


def default_rig(width: int = IMG_W, height: int = IMG_H) -> CameraRig:
    K = intrinsics(width, height)
    return CameraRig(tuple(Camera(n, K, extrinsics(y), height, width) for n, y in CAMERA_YAWS.items()))
