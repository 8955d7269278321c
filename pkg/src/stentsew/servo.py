"""Image-based visual servoing: interaction matrix and control law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, normalize, project
from .geometry import Pose, Twist


class ServoError(RuntimeError):
    pass


class InvalidDepthError(ServoError, ValueError):
    pass


class InsufficientFeaturesError(ServoError):
    pass


class IllConditionedError(ServoError):
    pass


EYE_TO_HAND = "eye_to_hand"
EYE_IN_HAND = "eye_in_hand"


@dataclass(frozen=True)
class ServoConfig:
    gain: float = 0.5                 # lambda, 1/s
    epsilon: float = 1e-4             # stop threshold on ||x - x*||, normalized units
    max_linear: float = 0.05          # m/s
    max_angular: float = 0.5          # rad/s
    n_min: int = 4
    max_condition: float = 1e4
    rcond: float = 1e-8               # pinv truncation relative to sigma_max
    max_iterations: int = 200
    # eye_to_hand: camera fixed, features ride on the end-effector (this rig).
    # eye_in_hand: camera carried by the end-effector.
    mount: str = EYE_TO_HAND

    def __post_init__(self):
        if self.gain <= 0 or self.epsilon <= 0:
            raise ValueError("gain and epsilon must be positive")
        if self.n_min < 4:
            raise ValueError("n_min must be at least 4")
        if self.mount not in (EYE_TO_HAND, EYE_IN_HAND):
            raise ValueError(f"unknown camera mount {self.mount!r}")


@dataclass(frozen=True)
class FeatureSet:
    """Current/desired normalized coordinates of the pattern dots.

    Arrays are indexed in pattern-id order. ``depth`` is NaN where the depth
    reading was invalid; such entries also have ``valid`` False.
    """

    ids: np.ndarray
    current: np.ndarray    # (n, 2)
    desired: np.ndarray    # (n, 2)
    depth: np.ndarray      # (n,)
    valid: np.ndarray      # (n,) bool

    @classmethod
    def build(cls, current, desired, depth, valid=None, ids=None) -> FeatureSet:
        current = np.asarray(current, dtype=float).reshape(-1, 2)
        desired = np.asarray(desired, dtype=float).reshape(-1, 2)
        depth = np.asarray(depth, dtype=float).reshape(-1)
        n = len(current)
        if len(desired) != n or len(depth) != n:
            raise ValueError("current, desired and depth must have equal length")
        ok = np.isfinite(depth) & (depth > 0) & np.all(np.isfinite(current), axis=1)
        if valid is not None:
            ok &= np.asarray(valid, dtype=bool)
        ids = np.arange(n) if ids is None else np.asarray(ids)
        order = np.argsort(ids, kind="stable")
        return cls(ids[order], current[order], desired[order], depth[order], ok[order])

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))


def interaction_row(x: float, y: float, Z: float) -> np.ndarray:
    """2x6 interaction matrix of a normalized image point at depth Z."""
    if not Z > 0:
        raise InvalidDepthError(f"depth must be positive, got {Z}")
    iz = 1.0 / Z
    return np.array([
        [-iz, 0.0, x * iz, x * y, -(1.0 + x * x), y],
        [0.0, -iz, y * iz, 1.0 + y * y, -x * y, -x],
    ])


def _check(fs: FeatureSet, n_min: int) -> None:
    if fs.n_valid < n_min:
        raise InsufficientFeaturesError(f"{fs.n_valid} valid features, need {n_min}")


def stack_interaction(fs: FeatureSet, n_min: int = 1) -> np.ndarray:
    """Stack the rows of every valid feature (id order) into a 2n x 6 matrix."""
    _check(fs, n_min)
    x = fs.current[fs.valid, 0]
    y = fs.current[fs.valid, 1]
    iz = 1.0 / fs.depth[fs.valid]
    L = np.zeros((2 * len(x), 6))
    L[0::2, 0] = -iz
    L[0::2, 2] = x * iz
    L[0::2, 3] = x * y
    L[0::2, 4] = -(1.0 + x * x)
    L[0::2, 5] = y
    L[1::2, 1] = -iz
    L[1::2, 2] = y * iz
    L[1::2, 3] = 1.0 + y * y
    L[1::2, 4] = -x * y
    L[1::2, 5] = -x
    return L


def feature_error(fs: FeatureSet, n_min: int = 1) -> np.ndarray:
    """Stacked ``x - x*`` over valid features, id order."""
    _check(fs, n_min)
    return (fs.current[fs.valid] - fs.desired[fs.valid]).reshape(-1)


@dataclass(frozen=True)
class ServoCommand:
    twist: Twist
    error: np.ndarray
    error_norm: float
    condition: float
    converged: bool


def clamp_twist(xi: np.ndarray, max_linear: float, max_angular: float) -> np.ndarray:
    """Scale the whole twist so every component respects its limit."""
    limits = np.array([max_linear] * 3 + [max_angular] * 3)
    ratio = float(np.max(np.abs(xi) / limits))
    return xi / ratio if ratio > 1.0 else xi


def compute_command(fs: FeatureSet, cVe: np.ndarray, cfg: ServoConfig) -> ServoCommand:
    """Evaluate the control law and return the twist with diagnostics."""
    e = feature_error(fs, cfg.n_min)
    norm = float(np.linalg.norm(e))
    J = stack_interaction(fs, cfg.n_min) @ cVe
    s = np.linalg.svd(J, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if norm < cfg.epsilon:
        return ServoCommand(Twist(), e, norm, cond, True)
    if cond > cfg.max_condition:
        raise IllConditionedError(f"interaction condition number {cond:.3g} exceeds "
                                  f"{cfg.max_condition:.3g}")
    # Features on the hand move opposite to an equivalent camera motion, so the
    # eye-to-hand regulator flips the sign of the eye-in-hand law.
    sign = -1.0 if cfg.mount == EYE_IN_HAND else 1.0
    xi = sign * cfg.gain * (np.linalg.pinv(J, rcond=cfg.rcond) @ e)
    xi = clamp_twist(xi, cfg.max_linear, cfg.max_angular)
    return ServoCommand(Twist.from_vector(xi), e, norm, cond, False)


def control_law(fs: FeatureSet, cVe: np.ndarray, cfg: ServoConfig) -> Twist:
    """End-effector twist (expressed in {e}) driving ``x`` toward ``x*``."""
    return compute_command(fs, cVe, cfg).twist


def desired_features(cTt_desired: Pose, tTp: Pose, pattern, K: CameraIntrinsics) -> np.ndarray:
    """Normalized coordinates of the pattern dots with the tip at ``cTt_desired``."""
    Xc = (cTt_desired @ tTp).transform_points(np.asarray(pattern, dtype=float).reshape(-1, 3))
    return normalize(project(Xc, K), K)
