"""Rigid-body transforms, velocity twists and pose interpolation.

Conventions: a Pose ``T_ab`` maps points expressed in frame {b} into frame
{a} (``p_a = R p_b + t``). Twists are ordered ``(vx, vy, vz, wx, wy, wz)``.
SI units throughout (metres, radians).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def skew(v) -> np.ndarray:
    """Skew-symmetric matrix such that ``skew(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def exp_so3(rotvec) -> np.ndarray:
    """Rodrigues formula; ``rotvec`` is axis * angle."""
    w = np.asarray(rotvec, dtype=float).reshape(3)
    th = float(np.linalg.norm(w))
    W = skew(w)
    if th < 1e-10:
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (math.sin(th) / th) * W + ((1.0 - math.cos(th)) / th**2) * (W @ W)


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=float).reshape(3)
    return exp_so3(a / np.linalg.norm(a) * angle)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(R) - 1.0) * 0.5
    # arccos is badly conditioned near 0 and pi; atan2 of |vee| and cos is not
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(s, c)


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.linalg.det(U @ Vt)])
    return U @ D @ Vt


# -- quaternions (w, x, y, z) -------------------------------------------------

def quat_from_matrix(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    m = np.asarray(R, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def slerp_rotation(R0: np.ndarray, R1: np.ndarray, t: float) -> np.ndarray:
    """Constant-angular-speed interpolation along the shorter arc."""
    q0 = quat_from_matrix(R0)
    q1 = quat_from_matrix(R1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        return quat_to_matrix(q0 + t * (q1 - q0))
    if dot < 1e-12:
        # relative rotation of exactly pi: both directions are equally short.
        # (rel + I) / 2 = a a^T; orient a so its largest component is positive.
        aat = 0.5 * (R0.T @ R1 + np.eye(3))
        k = int(np.argmax(np.diag(aat)))
        axis = aat[:, k] / math.sqrt(aat[k, k])
        if axis[int(np.argmax(np.abs(axis)))] < 0:
            axis = -axis
        return R0 @ axis_angle_rotation(axis, math.pi * t)
    omega = math.acos(dot)
    s = math.sin(omega)
    q = (math.sin((1.0 - t) * omega) / s) * q0 + (math.sin(t * omega) / s) * q1
    return quat_to_matrix(q)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform on SE(3)."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, T) -> Pose:
        T = np.asarray(T, dtype=float)
        if T.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {T.shape}")
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(np.eye(3), t)

    @classmethod
    def from_rotation(cls, R) -> Pose:
        return cls(R, np.zeros(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        p = np.asarray(other, dtype=float)
        return self.transform_points(p)

    def inverse(self) -> Pose:
        return invert(self)

    def transform_points(self, p) -> np.ndarray:
        """Apply to a 3-vector or an (N, 3) array of points."""
        p = np.asarray(p, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.linalg.norm(R.T @ R - np.eye(3)) < tol
                and abs(np.linalg.det(R) - 1.0) < tol
                and bool(np.all(np.isfinite(self.translation))))

    def normalized(self) -> Pose:
        return Pose(orthonormalize(self.rotation), self.translation)

    def to_list(self) -> list[float]:
        """Row-major flattening of the 4x4 homogeneous matrix."""
        return [float(v) for v in self.matrix().reshape(-1)]

    @classmethod
    def from_list(cls, values) -> Pose:
        return cls.from_matrix(np.asarray(values, dtype=float).reshape(4, 4))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def rotation_about_point(axis, angle: float, point) -> Pose:
    """Rotation by ``angle`` about the line through ``point`` along ``axis``."""
    R = axis_angle_rotation(axis, angle)
    p = np.asarray(point, dtype=float)
    return Pose(R, p - R @ p)


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation distance, rotation angle) between two poses."""
    return (float(np.linalg.norm(a.translation - b.translation)),
            rotation_angle(a.rotation.T @ b.rotation))


def interpolate_pose(t: float, T0: Pose, T1: Pose) -> Pose:
    """Linear interpolation of translation and slerp of rotation."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"interpolation parameter must lie in [0, 1], got {t}")
    if t == 0.0:
        return T0
    if t == 1.0:
        return T1
    trans = (1.0 - t) * T0.translation + t * T1.translation
    return Pose(slerp_rotation(T0.rotation, T1.rotation, t), trans)


@dataclass(frozen=True, eq=False)
class Twist:
    """Spatial velocity: linear (m/s) and angular (rad/s) parts."""

    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.array(self.linear, dtype=float).reshape(3)
        w = np.array(self.angular, dtype=float).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise ValueError("twist components must be finite")
        v.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "linear", v)
        object.__setattr__(self, "angular", w)

    @classmethod
    def from_vector(cls, xi) -> Twist:
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def __mul__(self, k: float) -> Twist:
        return Twist(self.linear * k, self.angular * k)

    __rmul__ = __mul__


def velocity_twist(T: Pose) -> np.ndarray:
    """6x6 matrix ``[[R, [t]x R], [0, R]]`` mapping twists from {j} to {k}.

    ``T`` is ``T_kj``.
    """
    R = T.rotation
    V = np.zeros((6, 6))
    V[:3, :3] = R
    V[:3, 3:] = skew(T.translation) @ R
    V[3:, 3:] = R
    return V
