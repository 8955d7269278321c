"""Stitch planning: sewing frames, entry pose, pierce angle, reorientation, pull-out.

The needle is a semicircle of radius R lying in the tip frame's y-z plane and
passing through the tip (the tip-frame origin). Jaw rotation drives the tip
around the circle about an axis parallel to the tip x-axis.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .camera import PointCloud
from .geometry import Pose, interpolate_pose, rot_x, rotation_about_point

CHORD = "chord"
ARC = "arc"

MAX_STITCH = 5e-3       # device limit for the semicircular needle
MIN_STITCH = 1e-3
WARN_STITCH = 2e-3      # below this fabric deformation dominates the outcome


class PlanningError(ValueError):
    pass


class DegenerateNeighbourhoodError(PlanningError):
    pass


class StitchTooLargeError(PlanningError):
    pass


@dataclass(frozen=True)
class NeedleSpec:
    radius: float = 4e-3
    arc_extent: float = math.pi
    theta: float = math.pi / 2

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("needle radius must be positive")
        if not 0 < self.theta <= math.pi:
            raise ValueError("jaw rotation must lie in (0, pi]")


@dataclass(frozen=True)
class SewingFrame:
    origin: np.ndarray
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def pose(self) -> Pose:
        return Pose(np.column_stack([self.x, self.y, self.z]), self.origin)


def fit_local_plane(cloud: PointCloud, target, radius: float = 5e-3,
                    min_neighbours: int = 8, viewpoint=(0.0, 0.0, 0.0)):
    """Least-squares plane through the valid points within ``radius`` of ``target``.

    Returns ``(centroid, unit normal)`` with the normal facing ``viewpoint``.
    """
    target = np.asarray(target, dtype=float)
    pts = cloud.valid_points
    near = pts[np.sum((pts - target) ** 2, axis=1) <= radius * radius]
    if len(near) < min_neighbours:
        raise DegenerateNeighbourhoodError(
            f"{len(near)} valid neighbours within {radius * 1e3:.1f} mm, need {min_neighbours}")
    centroid = near.mean(axis=0)
    _, s, Vt = np.linalg.svd(near - centroid, full_matrices=False)
    if s[1] < 1e-12:
        raise DegenerateNeighbourhoodError("neighbourhood is collinear")
    n = Vt[-1]
    if np.dot(n, np.asarray(viewpoint, dtype=float) - centroid) < 0:
        n = -n
    return centroid, n / np.linalg.norm(n)


def estimate_normal(cloud: PointCloud, target, radius: float = 5e-3,
                    min_neighbours: int = 8) -> np.ndarray:
    """Unit surface normal at ``target``, oriented toward the camera origin."""
    return fit_local_plane(cloud, target, radius, min_neighbours)[1]


def sewing_frame(target, next_target, normal) -> SewingFrame:
    target = np.asarray(target, dtype=float)
    z = np.asarray(normal, dtype=float)
    z = z / np.linalg.norm(z)
    direction = np.asarray(next_target, dtype=float) - target
    if np.linalg.norm(direction) < 1e-12:
        raise PlanningError("target and next target coincide")
    x = direction - np.dot(direction, z) * z
    nx = np.linalg.norm(x)
    if nx < 1e-9 * np.linalg.norm(direction):
        raise PlanningError("sewing direction is parallel to the surface normal")
    x = x / nx
    y = np.cross(z, x)
    return SewingFrame(target, x, y, z)


def tilt_offset(alpha: float, d: float) -> Pose:
    """Tip-frame offset applied at the target: tilt about x, half-stitch shift along y."""
    return Pose(rot_x(alpha), np.array([0.0, 0.5 * d, 0.0]))


def entry_pose(frame: SewingFrame, alpha: float, d: float) -> Pose:
    if not 0 <= alpha < math.pi / 2:
        raise ValueError("tilt must lie in [0, pi/2)")
    if d < 0:
        raise ValueError("stitch size must be non-negative")
    return frame.pose() @ tilt_offset(alpha, d)


def pierce_depth(theta: float, R: float) -> float:
    """Arc length of needle driven through the fabric."""
    if not 0 < theta <= math.pi:
        raise ValueError("jaw rotation must lie in (0, pi]")
    return theta * R


def stitch_angle(d: float, R: float, mode: str = CHORD) -> float:
    """Jaw rotation giving stitch size ``d``.

    arc: ``d`` is the pierced arc length, theta = d / R.
    chord: ``d`` is the entry-to-exit distance, d = 2 R sin(theta / 2).
    """
    if d <= 0:
        raise ValueError("stitch size must be positive")
    if mode == ARC:
        if d > math.pi * R:
            raise StitchTooLargeError(f"{d * 1e3:.2f} mm exceeds the needle arc")
        return d / R
    if mode == CHORD:
        if d >= 2.0 * R:
            raise StitchTooLargeError(f"{d * 1e3:.2f} mm exceeds the needle diameter")
        return 2.0 * math.asin(d / (2.0 * R))
    raise ValueError(f"unknown stitch mode {mode!r}")


def chord_length(theta: float, R: float) -> float:
    return 2.0 * R * math.sin(0.5 * theta)


def needle_center(R: float, theta: float, alpha: float) -> np.ndarray:
    """Needle-circle centre in the tip frame for a planned stitch.

    The needle is preset in the jaws so that after the 2*alpha reorientation the
    arc driven in by ``theta`` meets the surface again: the centre then sits at
    height R cos(theta/2) above the surface, behind the entry along -y.
    """
    c_final = np.array([0.0, -R * math.sin(0.5 * theta), R * math.cos(0.5 * theta)])
    return rot_x(alpha) @ c_final


def needle_point(center: np.ndarray, phi: float) -> np.ndarray:
    """Tip-frame point reached after driving the tip by ``phi`` around the needle."""
    return center + rot_x(-phi) @ (-center)


def reorientation_sequence(entry: Pose, entry_point, alpha: float,
                           step: float = math.radians(5.0)) -> list[Pose]:
    """Poses rotating the device by -2*alpha about the tip x-axis through ``entry_point``.

    Full ``step`` increments plus a final partial one, so the total is exactly 2*alpha.
    """
    if alpha <= 0:
        raise ValueError("tilt must be positive")
    if step <= 0:
        raise ValueError("step must be positive")
    total = 2.0 * alpha
    n = max(1, math.ceil(total / step - 1e-9))
    axis = entry.rotation[:, 0]
    angles = [min(k * step, total) for k in range(1, n)] + [total]
    return [rotation_about_point(axis, -a, entry_point) @ entry for a in angles]


def pullout_trajectory(current: Pose, standby: Pose, n_steps: int = 10) -> list[Pose]:
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    return [interpolate_pose(k / n_steps, current, standby) for k in range(1, n_steps + 1)]


# -- plan ---------------------------------------------------------------------

@dataclass(frozen=True)
class Approach:
    waypoints: list[Pose]
    name: str = "approach"


@dataclass(frozen=True)
class Pierce:
    theta: float
    name: str = "pierce"


@dataclass(frozen=True)
class Reorient:
    waypoints: list[Pose]
    name: str = "reorient"


@dataclass(frozen=True)
class Switch:
    name: str = "switch"


@dataclass(frozen=True)
class Retrieve:
    name: str = "retrieve"


@dataclass(frozen=True)
class PullOut:
    waypoints: list[Pose]
    name: str = "pullout"


Phase = Union[Approach, Pierce, Reorient, Switch, Retrieve, PullOut]
PHASE_ORDER = (Approach, Pierce, Reorient, Switch, Retrieve, PullOut)


@dataclass(frozen=True)
class StitchPlan:
    phases: tuple
    d: float
    alpha: float
    theta: float
    mode: str
    needle: NeedleSpec
    frame: SewingFrame
    entry: Pose
    needle_center: np.ndarray = field(repr=False)

    @property
    def entry_point(self) -> np.ndarray:
        return self.entry.translation

    def phase(self, kind):
        return next(p for p in self.phases if isinstance(p, kind))

    def to_text(self) -> str:
        """One line per waypoint: phase, index, 16 row-major pose entries, parameters."""
        out = io.StringIO()
        out.write(f"# stitch d={self.d!r} alpha={self.alpha!r} theta={self.theta!r} "
                  f"mode={self.mode} R={self.needle.radius!r}\n")
        for ph in self.phases:
            poses = getattr(ph, "waypoints", None)
            if poses is None:
                extra = f"theta={ph.theta!r}" if isinstance(ph, Pierce) else ""
                out.write(f"{ph.name},-,{extra}\n")
                continue
            for i, p in enumerate(poses):
                out.write(f"{ph.name},{i}," + ",".join(repr(v) for v in p.to_list()) + "\n")
        return out.getvalue()


def plan_stitch(target, next_target, cloud: PointCloud, spec: NeedleSpec, d: float,
                alpha: float, *, mode: str = CHORD, standby: Pose | None = None,
                normal_radius: float = 5e-3, reorient_step: float = math.radians(5.0),
                hover: float = 10e-3, pullout_steps: int = 10,
                viewpoint=(0.0, 0.0, 0.0)) -> StitchPlan:
    """Plan the six-step stitch at ``target`` (camera frame, metres)."""
    if not d > 0:
        raise ValueError("stitch size must be positive")
    if d > MAX_STITCH + 1e-12:
        raise StitchTooLargeError(f"{d * 1e3:.2f} mm is larger than the "
                                  f"{MAX_STITCH * 1e3:.0f} mm device limit")
    if d < MIN_STITCH - 1e-12:
        raise PlanningError(f"{d * 1e3:.2f} mm is below the {MIN_STITCH * 1e3:.0f} mm minimum")
    if d < WARN_STITCH:
        warnings.warn(f"{d * 1e3:.2f} mm stitch: fabric deformation dominates below "
                      f"{WARN_STITCH * 1e3:.0f} mm", stacklevel=2)
    theta = stitch_angle(d, spec.radius, mode)

    centroid, normal = fit_local_plane(cloud, target, normal_radius, viewpoint=viewpoint)
    target = np.asarray(target, dtype=float)
    # snap the picked point onto the fitted plane to shed depth noise
    target = target - np.dot(target - centroid, normal) * normal
    frame = sewing_frame(target, next_target, normal)
    entry = entry_pose(frame, alpha, d)
    hover_pose = entry @ Pose.from_translation([0.0, 0.0, hover])
    reorient = reorientation_sequence(entry, entry.translation, alpha, reorient_step)
    if standby is None:
        standby = Pose(reorient[-1].rotation, reorient[-1].translation + 0.03 * frame.z)
    phases = (
        Approach([hover_pose, entry]),
        Pierce(theta),
        Reorient(reorient),
        Switch(),
        Retrieve(),
        PullOut(pullout_trajectory(reorient[-1], standby, pullout_steps)),
    )
    return StitchPlan(phases, d, alpha, theta, mode, NeedleSpec(spec.radius, spec.arc_extent, theta),
                      frame, entry, needle_center(spec.radius, theta, alpha))
