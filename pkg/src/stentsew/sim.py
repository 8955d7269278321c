"""Kinematic dual-arm world with a depth camera, fabric, dot pattern and thread.

Everything is expressed in the shared robot base frame {b} unless a name says
otherwise (``c`` camera, ``e`` end-effector, ``t`` needle tip, ``p`` pattern).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .camera import CameraIntrinsics, Feature, normalize, pixel_grid
from .geometry import Pose, Twist, exp_so3, velocity_twist
from .knot import ForceReading
from .servo import FeatureSet, ServoConfig, compute_command, desired_features
from .stitch import Reorient, StitchPlan, needle_point


class SimError(RuntimeError):
    pass


class ObservationLostError(SimError):
    pass


class MissedStitchError(SimError):
    pass


class WorkspaceViolation(SimError):
    pass


# -- fabric geometry ------------------------------------------------------------

@dataclass(frozen=True)
class PlaneFabric:
    """Rectangular fabric patch; ``normal`` points to the camera side."""

    point: np.ndarray
    normal: np.ndarray
    half_size: float = 0.06

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", n / np.linalg.norm(n))
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))

    def _basis(self):
        a = np.array([1.0, 0.0, 0.0]) if abs(self.normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        u = a - np.dot(a, self.normal) * self.normal
        u /= np.linalg.norm(u)
        return u, np.cross(self.normal, u)

    def signed_distance(self, p) -> np.ndarray:
        return (np.asarray(p, dtype=float) - self.point) @ self.normal

    def closest_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p - self.signed_distance(p) * self.normal

    def normal_at(self, p) -> np.ndarray:
        return self.normal

    def contains(self, p) -> bool:
        u, v = self._basis()
        d = np.asarray(p, dtype=float) - self.point
        return abs(d @ u) <= self.half_size and abs(d @ v) <= self.half_size

    def in_frame(self, T: Pose) -> PlaneFabric:
        """Same surface expressed in the frame {k} given ``T`` = T_kb."""
        return PlaneFabric(T @ self.point, T.rotation @ self.normal, self.half_size)

    def ray_depth(self, rays: np.ndarray) -> np.ndarray:
        """Depth along rays ``(x, y, 1)`` from the frame origin; NaN on miss."""
        den = rays @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.point @ self.normal) / den
        hit = np.isfinite(t) & (t > 0)
        pts = rays * np.where(hit, t, 0.0)[..., None]
        u, v = self._basis()
        d = pts - self.point
        hit &= (np.abs(d @ u) <= self.half_size) & (np.abs(d @ v) <= self.half_size)
        return np.where(hit, t, np.nan)


@dataclass(frozen=True)
class CylinderFabric:
    """Graft on a mandrel: cylinder of ``diameter`` about a finite axis segment."""

    axis_point: np.ndarray
    axis_dir: np.ndarray
    diameter: float = 22e-3
    length: float = 0.12

    def __post_init__(self):
        a = np.asarray(self.axis_dir, dtype=float)
        object.__setattr__(self, "axis_dir", a / np.linalg.norm(a))
        object.__setattr__(self, "axis_point", np.asarray(self.axis_point, dtype=float))

    @property
    def radius(self) -> float:
        return 0.5 * self.diameter

    def _radial(self, p):
        d = np.asarray(p, dtype=float) - self.axis_point
        return d - np.outer(d @ self.axis_dir, self.axis_dir).reshape(d.shape)

    def signed_distance(self, p) -> np.ndarray:
        return np.linalg.norm(self._radial(p), axis=-1) - self.radius

    def normal_at(self, p) -> np.ndarray:
        r = self._radial(p)
        return r / np.linalg.norm(r, axis=-1, keepdims=True)

    def closest_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return p - np.asarray(self.signed_distance(p))[..., None] * self.normal_at(p)

    def contains(self, p) -> bool:
        s = (np.asarray(p, dtype=float) - self.axis_point) @ self.axis_dir
        return abs(s) <= 0.5 * self.length

    def in_frame(self, T: Pose) -> CylinderFabric:
        return CylinderFabric(T @ self.axis_point, T.rotation @ self.axis_dir,
                              self.diameter, self.length)

    def ray_depth(self, rays: np.ndarray) -> np.ndarray:
        u = self.axis_dir
        a = self.axis_point
        dp = rays - np.outer(rays @ u, u).reshape(rays.shape)
        ap = a - (a @ u) * u
        A = np.sum(dp * dp, axis=-1)
        B = -2.0 * (dp @ ap)
        C = ap @ ap - self.radius ** 2
        disc = B * B - 4.0 * A * C
        with np.errstate(invalid="ignore", divide="ignore"):
            t = (-B - np.sqrt(disc)) / (2.0 * A)
        hit = (disc >= 0) & (t > 0)
        s = (rays * np.where(hit, t, 0.0)[..., None] - a) @ u
        hit &= np.abs(s) <= 0.5 * self.length
        return np.where(hit, t, np.nan)


# -- configuration ----------------------------------------------------------------

def default_pattern() -> np.ndarray:
    """4x4 dot grid, 8 mm pitch, with two dots raised 4 mm off the plate."""
    g = (np.arange(4) - 1.5) * 8e-3
    xx, yy = np.meshgrid(g, g)
    dots = np.column_stack([xx.ravel(), yy.ravel(), np.zeros(16)])
    dots[5, 2] = 4e-3
    dots[10, 2] = 4e-3
    return dots


def looking_down_camera(height: float = 0.62) -> Pose:
    """Camera above the workspace, optical axis along -z of the base."""
    return Pose(np.diag([1.0, -1.0, -1.0]), [0.0, 0.0, height])


@dataclass(frozen=True)
class ThreadModel:
    """Elastic thread: tension = k * max(0, path length - free length).

    The path runs anchor -> hook (thread manipulator, carries the sensor) ->
    attachment (needle midpoint on the sewing device). Without an anchor it is
    the single segment hook -> attachment.
    """

    free_length: float
    stiffness: float = 100.0
    anchor: np.ndarray | None = None

    def path_length(self, hook, attachment) -> float:
        L = float(np.linalg.norm(np.asarray(attachment) - hook))
        if self.anchor is not None:
            L += float(np.linalg.norm(hook - self.anchor))
        return L

    def tension(self, hook, attachment) -> float:
        return self.stiffness * max(0.0, self.path_length(hook, attachment) - self.free_length)

    def hook_force(self, hook, attachment) -> np.ndarray:
        """Force on the hook in the base frame."""
        T = self.tension(hook, attachment)
        if T == 0.0:
            return np.zeros(3)
        hook = np.asarray(hook, dtype=float)
        to_att = np.asarray(attachment) - hook
        f = to_att / np.linalg.norm(to_att)
        if self.anchor is not None:
            to_anchor = self.anchor - hook
            f = f + to_anchor / np.linalg.norm(to_anchor)
        return T * f


@dataclass(frozen=True)
class WorldConfig:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    bTc: Pose = field(default_factory=looking_down_camera)
    fabric: PlaneFabric | CylinderFabric = field(default_factory=lambda: PlaneFabric(
        [0.0, 0.0, 0.32], [0.0, math.sin(math.radians(15)), math.cos(math.radians(15))]))
    pattern: np.ndarray = field(default_factory=default_pattern)
    tTp: Pose = field(default_factory=lambda: Pose.from_translation([0.0, 0.0, 0.03]))
    eTt: Pose = field(default_factory=lambda: Pose.from_translation([0.0, 0.0, -0.10]))
    lTh: Pose = field(default_factory=lambda: Pose.from_translation([0.0, 0.0, -0.06]))
    pixel_sigma: float = 0.0
    depth_sigma: float = 0.0
    dropout: float = 0.0
    dt: float = 0.1
    workspace_lo: np.ndarray = field(default_factory=lambda: np.array([-0.4, -0.5, 0.0]))
    workspace_hi: np.ndarray = field(default_factory=lambda: np.array([0.4, 0.5, 0.6]))
    jaw_press_bias: float = 0.0
    contact_tolerance: float = 3e-3
    needle_radius: float = 4e-3
    switch_duration: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def cTb(self) -> Pose:
        return self.bTc.inverse()

    @property
    def needle_midpoint(self) -> np.ndarray:
        """Thread attachment in the tip frame."""
        R = self.needle_radius
        return np.array([0.0, -R, R])


@dataclass(frozen=True)
class ArmState:
    """Snapshot of both arms. ``needle_jaw`` is None while the needle is in transit."""

    left: Pose
    right: Pose
    needle_jaw: str | None = "A"
    workspace_flag: bool = False
    time: float = 0.0


@dataclass(frozen=True)
class Observation:
    features: tuple[Feature, ...]
    depth_image: np.ndarray | None = None

    @property
    def pixels(self) -> np.ndarray:
        return np.array([f.pixel for f in self.features], dtype=float)

    @property
    def depths(self) -> np.ndarray:
        return np.array([f.depth for f in self.features], dtype=float)

    def feature_set(self, desired, K: CameraIntrinsics) -> FeatureSet:
        ids = np.array([f.id for f in self.features])
        return FeatureSet.build(normalize(self.pixels, K), desired, self.depths, ids=ids)


@dataclass(frozen=True)
class StitchMeasurement:
    size: float
    entry: np.ndarray
    exit: np.ndarray
    contact_offset: float


class World:
    """Single-writer mutable world; snapshots (`state`) are immutable."""

    def __init__(self, config: WorldConfig, right: Pose | None = None,
                 left: Pose | None = None, rng: np.random.Generator | None = None):
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        right = right if right is not None else Pose.from_translation([0.05, 0.05, 0.45])
        left = left if left is not None else Pose.from_translation([-0.05, -0.1, 0.45])
        self.state = ArmState(left, right)
        self.thread: ThreadModel | None = None

    # -- kinematics -----------------------------------------------------------
    def tip_pose(self, state: ArmState | None = None) -> Pose:
        """Needle tip in the base frame."""
        s = state or self.state
        return s.right @ self.config.eTt

    def camera_tip_pose(self) -> Pose:
        return self.config.cTb @ self.tip_pose()

    def hook_point(self) -> np.ndarray:
        return (self.state.left @ self.config.lTh).translation

    def needle_attachment(self) -> np.ndarray:
        return self.tip_pose() @ self.config.needle_midpoint

    def _clamp(self, pose: Pose) -> tuple[Pose, bool]:
        lo, hi = self.config.workspace_lo, self.config.workspace_hi
        t = np.clip(pose.translation, lo, hi)
        hit = bool(np.any(t != pose.translation))
        return (Pose(pose.rotation, t) if hit else pose), hit

    def step(self, commands: dict, dt: float | None = None, events=()) -> ArmState:
        """Advance by ``dt``. Commands map 'left'/'right' to a body-frame Twist or a Pose target."""
        dt = self.config.dt if dt is None else dt
        s = self.state
        poses = {"left": s.left, "right": s.right}
        flag = False
        for arm, cmd in commands.items():
            P = poses[arm]
            if isinstance(cmd, Twist):
                R = P.rotation
                P = Pose(R @ exp_so3(cmd.angular * dt), P.translation + R @ cmd.linear * dt)
            elif isinstance(cmd, Pose):
                P = cmd
            elif cmd is not None:
                raise TypeError(f"unsupported command {cmd!r}")
            P, hit = self._clamp(P)
            flag |= hit
            poses[arm] = P
        jaw = s.needle_jaw
        for ev in events:
            if ev == "needle_switch":
                jaw = "B" if jaw == "A" else "A"
        self.state = ArmState(poses["left"], poses["right"], jaw, flag, s.time + dt)
        return self.state

    # -- sensing ------------------------------------------------------------------
    def observe(self, with_depth: bool = False) -> Observation:
        cfg = self.config
        K = cfg.intrinsics
        cTp = cfg.cTb @ self.tip_pose() @ cfg.tTp
        Xc = cTp.transform_points(cfg.pattern)
        n = len(Xc)
        in_front = Xc[:, 2] > 1e-6
        Z = np.where(in_front, Xc[:, 2], 1.0)
        pix = np.column_stack([K.fx * Xc[:, 0] / Z + K.cu, K.fy * Xc[:, 1] / Z + K.cv])
        pix = pix + self.rng.normal(0.0, cfg.pixel_sigma, size=(n, 2)) if cfg.pixel_sigma > 0 else pix
        depth = Z + self.rng.normal(0.0, cfg.depth_sigma, size=n) if cfg.depth_sigma > 0 else Z.copy()
        keep = in_front & (pix[:, 0] >= 0) & (pix[:, 0] < K.width) \
            & (pix[:, 1] >= 0) & (pix[:, 1] < K.height)
        if cfg.dropout > 0:
            keep &= self.rng.random(n) >= cfg.dropout
        if not np.any(keep):
            raise ObservationLostError("no pattern dot has a valid observation")
        depth = np.where(keep, depth, np.nan)
        feats = tuple(Feature(i, (float(pix[i, 0]), float(pix[i, 1])), float(depth[i]))
                      for i in range(n))
        return Observation(feats, self.render_depth() if with_depth else None)

    def render_depth(self) -> np.ndarray:
        """Fabric depth image in metres; 0 marks missing / dropped pixels."""
        cfg = self.config
        K = cfg.intrinsics
        rays = np.concatenate([normalize(pixel_grid(K), K),
                               np.ones((K.height, K.width, 1))], axis=-1)
        Z = cfg.fabric.in_frame(cfg.cTb).ray_depth(rays)
        if cfg.depth_sigma > 0:
            Z = Z + self.rng.normal(0.0, cfg.depth_sigma, size=Z.shape)
        if cfg.dropout > 0:
            Z = np.where(self.rng.random(Z.shape) < cfg.dropout, np.nan, Z)
        return np.where(np.isfinite(Z) & (Z > 0), Z, 0.0)

    def thread_force(self) -> ForceReading:
        """Spring-thread force on the hook, expressed in the left (sensor) frame."""
        if self.thread is None:
            raise SimError("no thread attached")
        f_b = self.thread.hook_force(self.hook_point(), self.needle_attachment())
        return ForceReading.from_vector(self.state.left.rotation.T @ f_b)

    # -- stitching ----------------------------------------------------------------
    def pierce_and_measure(self, plan: StitchPlan) -> StitchMeasurement:
        """Execute pierce, reorientation and switch from the current pose; measure the stitch.

        The device is seated on the fabric first: any residual offset of the
        tip along the surface normal is taken up by contact.
        """
        cfg = self.config
        fabric = cfg.fabric
        tip = self.tip_pose()
        surf = fabric.closest_point(tip.translation)
        offset = float(fabric.signed_distance(tip.translation))
        if abs(offset) > cfg.contact_tolerance or not fabric.contains(surf):
            raise MissedStitchError(f"needle tip is {offset * 1e3:.2f} mm from the fabric "
                                    "or outside its boundary")
        shift = surf - tip.translation
        self.step({"right": Pose(self.state.right.rotation, self.state.right.translation + shift)}, 0.0)
        seated_tip = self.tip_pose()
        entry = seated_tip.translation

        # reorientation replayed relative to the seated tip (robot kinematics are exact)
        cTt_plan = plan.entry
        for wp in plan.phase(Reorient).waypoints:
            rel = cTt_plan.inverse() @ wp
            self.step({"right": seated_tip @ rel @ cfg.eTt.inverse()})
        self.step({}, cfg.switch_duration, events=("needle_switch",))

        final_tip = self.tip_pose()
        center = plan.needle_center

        def sd(phi: float) -> float:
            return float(fabric.signed_distance(final_tip @ needle_point(center, phi)))

        exit_phi = _exit_crossing(sd, plan.needle.arc_extent)
        if exit_phi is None:
            raise MissedStitchError("needle arc does not pass through the fabric")
        exit_pt = final_tip @ needle_point(center, exit_phi)
        size = float(np.linalg.norm(exit_pt - entry)) + cfg.jaw_press_bias
        return StitchMeasurement(size, entry, exit_pt, offset)


def _exit_crossing(sd: Callable[[float], float], extent: float, samples: int = 1440):
    """First angle where the arc, having gone below the surface, comes back out."""
    phis = np.linspace(0.0, extent, samples + 1)[1:]
    vals = np.array([sd(p) for p in phis])
    below = np.nonzero(vals < 0)[0]
    if len(below) == 0:
        return None
    after = np.nonzero(vals[below[0]:] >= 0)[0]
    if len(after) == 0:
        return None
    j = below[0] + after[0]
    return brentq(sd, phis[j - 1], phis[j], xtol=1e-15, rtol=4 * np.finfo(float).eps)


# -- closed-loop servoing -------------------------------------------------------------

@dataclass
class ServoLog:
    rows: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def error_norms(self) -> np.ndarray:
        return np.array([r["error_norm"] for r in self.rows])


def servo_to_pose(world: World, cTt_goal: Pose, cfg: ServoConfig,
                  max_iterations: int | None = None) -> ServoLog:
    """Drive the right arm until the dot pattern matches its view at ``cTt_goal``."""
    wc = world.config
    K = wc.intrinsics
    desired = desired_features(cTt_goal, wc.tTp, wc.pattern, K)
    n_iter = cfg.max_iterations if max_iterations is None else max_iterations
    log = ServoLog()
    for k in range(n_iter + 1):
        obs = world.observe()
        fs = obs.feature_set(desired, K)
        cTe = wc.cTb @ world.state.right
        cmd = compute_command(fs, velocity_twist(cTe), cfg)
        pix_err = (fs.current[fs.valid] - fs.desired[fs.valid]) * np.array([K.fx, K.fy])
        log.rows.append({
            "iteration": k,
            "error_norm": cmd.error_norm,
            "pixel_rms": float(np.sqrt(np.mean(np.sum(pix_err ** 2, axis=1)))),
            "condition": cmd.condition,
            "twist": cmd.twist.vector(),
            "pixel_error": np.linalg.norm(pix_err, axis=1),
        })
        log.iterations = k
        if cmd.converged:
            log.converged = True
            break
        if k == n_iter:
            break
        world.step({"right": cmd.twist})
    return log
