"""Pinhole camera with depth: pixel/normalized conversion and point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class BehindCameraError(ValueError):
    """A point has non-positive depth in the camera frame."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 600.0
    fy: float = 600.0
    cu: float = 320.0
    cv: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cu < self.width and 0 < self.cv < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cu], [0.0, self.fy, self.cv], [0.0, 0.0, 1.0]])

    @property
    def principal_point(self) -> np.ndarray:
        return np.array([self.cu, self.cv])


@dataclass(frozen=True)
class Feature:
    """A tracked dot: pixel position, depth (NaN when invalid) and pattern id."""

    id: int
    pixel: tuple[float, float]
    depth: float = float("nan")

    @property
    def valid(self) -> bool:
        return bool(np.isfinite(self.depth) and self.depth > 0)


@dataclass(frozen=True)
class PointCloud:
    """Ordered points in the camera frame with a validity mask.

    ``points`` is (N, 3); invalid rows hold NaN and are excluded by ``mask``.
    ``shape`` records the (height, width) of the source image if any.
    """

    points: np.ndarray
    mask: np.ndarray
    shape: tuple[int, int] | None = None

    @property
    def valid_points(self) -> np.ndarray:
        return self.points[self.mask]

    def __len__(self) -> int:
        return len(self.points)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("x,y,z,valid\n")
            for p, ok in zip(self.points, self.mask):
                fh.write(f"{p[0]!r},{p[1]!r},{p[2]!r},{int(ok)}\n")

    def to_ply(self, path) -> None:
        """ASCII PLY with valid points only."""
        pts = self.valid_points
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(pts)}\n")
            fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
            for p in pts:
                fh.write(f"{p[0]!r} {p[1]!r} {p[2]!r}\n")


def normalize(m, K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates (..., 2) to normalized image coordinates."""
    m = np.asarray(m, dtype=float)
    return np.stack([(m[..., 0] - K.cu) / K.fx, (m[..., 1] - K.cv) / K.fy], axis=-1)


def denormalize(x, K: CameraIntrinsics) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.stack([x[..., 0] * K.fx + K.cu, x[..., 1] * K.fy + K.cv], axis=-1)


def project(X, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame point(s) (..., 3) to pixel coordinates (..., 2)."""
    X = np.asarray(X, dtype=float)
    Z = X[..., 2]
    if np.any(~(Z > 0)):
        raise BehindCameraError("point at or behind the camera plane")
    return np.stack([K.fx * X[..., 0] / Z + K.cu, K.fy * X[..., 1] / Z + K.cv], axis=-1)


def backproject(m, Z, K: CameraIntrinsics) -> np.ndarray:
    """Pixel(s) plus depth to camera-frame point(s); NaN rows where depth is invalid."""
    x = normalize(m, K)
    Z = np.asarray(Z, dtype=float)
    ok = np.isfinite(Z) & (Z > 0)
    Zs = np.where(ok, Z, np.nan)
    return np.stack([x[..., 0] * Zs, x[..., 1] * Zs, Zs], axis=-1)


def pixel_grid(K: CameraIntrinsics) -> np.ndarray:
    """(H, W, 2) array of pixel-centre coordinates (u = column, v = row)."""
    v, u = np.mgrid[0:K.height, 0:K.width]
    return np.stack([u, v], axis=-1).astype(float)


def cloud_from_depth(depth: np.ndarray, K: CameraIntrinsics) -> PointCloud:
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (K.height, K.width):
        raise ValueError(f"depth image {depth.shape} does not match intrinsics "
                         f"({K.height}, {K.width})")
    pts = backproject(pixel_grid(K), depth, K).reshape(-1, 3)
    mask = np.all(np.isfinite(pts), axis=1)
    return PointCloud(pts, mask, depth.shape)


def load_depth(path, K: CameraIntrinsics | None = None) -> np.ndarray:
    """Read a depth grid in metres from CSV (``.csv``) or raw little-endian float32.

    Raw files need ``K`` for their dimensions.
    """
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return np.loadtxt(path, delimiter=",", dtype=float, ndmin=2)
    if K is None:
        raise ValueError("raw depth files need intrinsics for their shape")
    data = np.fromfile(path, dtype="<f4").astype(float)
    if data.size != K.width * K.height:
        raise ValueError(f"{path}: expected {K.width * K.height} samples, got {data.size}")
    return data.reshape(K.height, K.width)


def save_depth(path, depth: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, depth, delimiter=",", fmt="%.9g")
    else:
        np.asarray(depth, dtype="<f4").tofile(path)
