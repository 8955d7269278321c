"""Five-phase overhand-knot state machine with leader-follower tension control.

The controller is a reducer: ``advance(state, sensors, cfg)`` returns the next
state and the commands to execute this tick. It never touches the world.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import Pose


class KnotError(RuntimeError):
    pass


class ThreadExhaustedError(KnotError):
    pass


class StallError(KnotError):
    def __init__(self, phase, elapsed):
        super().__init__(f"force threshold not reached in {phase.value} after {elapsed:.1f} s")
        self.phase = phase


class KeyframeFormatError(ValueError):
    pass


class KnotPhase(Enum):
    SECURE_PULL = "SecurePull"
    CATCH_SEGMENT = "CatchSegment"
    SWITCH_AND_LOOP = "SwitchAndLoop"
    RELEASE_KNOT = "ReleaseKnot"
    RE_SECURE = "ReSecure"

    def next(self) -> KnotPhase:
        order = list(KnotPhase)
        return order[(order.index(self) + 1) % len(order)]


@dataclass(frozen=True)
class ForceReading:
    vector: np.ndarray
    dominant: int

    @classmethod
    def from_vector(cls, f) -> ForceReading:
        f = np.asarray(f, dtype=float).reshape(3)
        if not np.all(np.isfinite(f)):
            raise ValueError("force must be finite")
        return cls(f, int(np.argmax(np.abs(f))))

    @property
    def magnitude(self) -> float:
        """Magnitude along the dominant axis."""
        return float(abs(self.vector[self.dominant]))


@dataclass(frozen=True)
class TensionConfig:
    setpoint: float = 0.7             # N
    secure_threshold: float = 2.0     # N
    kp: float = 0.05                  # m / (s N)
    feed_direction: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 1.0, -1.0]) / np.sqrt(2.0))
    max_speed: float = 0.02           # m/s

    def __post_init__(self):
        if not 0 < self.setpoint < self.secure_threshold:
            raise ValueError("need 0 < setpoint < secure threshold")
        d = np.asarray(self.feed_direction, dtype=float)
        object.__setattr__(self, "feed_direction", d / np.linalg.norm(d))


@dataclass(frozen=True)
class KnotConfig:
    tension: TensionConfig = field(default_factory=TensionConfig)
    consumption: float = 17e-3        # thread used per stitch + knot, m
    timeout: float = 10.0             # s, per force-guarded phase
    pull_speed: float = 5e-3          # m/s
    pull_direction: np.ndarray = field(
        default_factory=lambda: np.array([0.0, -1.0, 1.0]) / np.sqrt(2.0))
    secure_direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    leader_speed: float = 1e-3        # m/s while tension mode is on
    move_speed: float = 0.02          # m/s for keyframe moves outside tension mode


@dataclass(frozen=True)
class Keyframe:
    phase: str
    pose: Pose


@dataclass(frozen=True)
class KnotState:
    phase: KnotPhase = KnotPhase.SECURE_PULL
    knots_completed: int = 0
    thread_remaining: float = 0.25
    keyframes: tuple[Keyframe, ...] = ()
    phase_elapsed: float = 0.0

    def __post_init__(self):
        if self.thread_remaining < 0:
            raise ValueError("thread_remaining must be non-negative")

    def poses_for(self, phase: KnotPhase) -> list[Pose]:
        return [k.pose for k in self.keyframes if k.phase == phase.value]


@dataclass(frozen=True)
class Sensors:
    force: ForceReading
    stitch_complete: bool = False
    pose_reached: bool = False
    dt: float = 0.1


# -- commands --------------------------------------------------------------------

@dataclass(frozen=True)
class PullArm:
    arm: str
    direction: np.ndarray
    speed: float


@dataclass(frozen=True)
class FollowRelative:
    """Right arm held at ``bTl @ lTr``."""
    lTr: Pose


@dataclass(frozen=True)
class TrackKeyframes:
    """Right arm (leader) visits ``bTl0 @ lTr_k``, ``bTl0`` frozen at issue time."""
    poses: tuple[Pose, ...]
    speed: float


@dataclass(frozen=True)
class TiltHooks:
    """Left arm moves to ``bTr @ inv(lTr)`` for each keyframe."""
    poses: tuple[Pose, ...]
    speed: float


@dataclass(frozen=True)
class SetTensionMode:
    on: bool
    setpoint: float = 0.0


@dataclass(frozen=True)
class NeedleSwitch:
    pass


@dataclass(frozen=True)
class Hold:
    arm: str


# -- laws ------------------------------------------------------------------------

def follower_pose(bTl: Pose, lTr: Pose) -> Pose:
    """Right end-effector pose from the live left pose and a recorded relative pose."""
    return bTl @ lTr


def tension_command(f: ForceReading, cfg: TensionConfig) -> np.ndarray:
    """Follower linear velocity; positive along the feed direction pays thread out."""
    v = cfg.kp * (f.magnitude - cfg.setpoint) * cfg.feed_direction
    speed = float(np.linalg.norm(v))
    if speed > cfg.max_speed:
        v = v * (cfg.max_speed / speed)
    return v


def _entry_commands(state: KnotState, cfg: KnotConfig) -> list:
    ph = state.phase
    if ph is KnotPhase.SECURE_PULL:
        standby = state.poses_for(ph)
        cmds = [FollowRelative(standby[0])] if standby else [Hold("right")]
        return cmds + [PullArm("left", cfg.pull_direction, cfg.pull_speed)]
    if ph is KnotPhase.CATCH_SEGMENT:
        return [SetTensionMode(True, cfg.tension.setpoint),
                TrackKeyframes(tuple(state.poses_for(ph)), cfg.leader_speed)]
    if ph is KnotPhase.SWITCH_AND_LOOP:
        return [NeedleSwitch()]
    if ph is KnotPhase.RELEASE_KNOT:
        return [SetTensionMode(False), Hold("right"),
                TiltHooks(tuple(state.poses_for(ph)), cfg.move_speed)]
    return [Hold("left"), PullArm("right", cfg.secure_direction, cfg.pull_speed)]


def check_thread(state: KnotState, cfg: KnotConfig) -> None:
    """Raise ThreadExhaustedError if the remaining thread cannot make another knot."""
    if state.thread_remaining < cfg.consumption:
        raise ThreadExhaustedError(
            f"{state.thread_remaining * 1e3:.1f} mm left, a knot needs "
            f"{cfg.consumption * 1e3:.1f} mm")


def advance(state: KnotState, sensors: Sensors, cfg: KnotConfig) -> tuple[KnotState, list]:
    """One controller tick.

    Commands for a phase are issued on its first tick; later ticks only check
    the exit condition. Force-guarded phases raise StallError on timeout.
    """
    ph = state.phase
    if state.phase_elapsed == 0.0:
        if ph is KnotPhase.SECURE_PULL:
            check_thread(state, cfg)
        return replace(state, phase_elapsed=sensors.dt), _entry_commands(state, cfg)

    force_guarded = ph in (KnotPhase.SECURE_PULL, KnotPhase.RE_SECURE)
    if force_guarded:
        done = sensors.force.magnitude >= cfg.tension.secure_threshold
    elif ph is KnotPhase.SWITCH_AND_LOOP:
        done = sensors.stitch_complete
    else:
        done = sensors.pose_reached

    if done:
        nxt = replace(state, phase=ph.next(), phase_elapsed=0.0)
        if ph is KnotPhase.RE_SECURE:
            nxt = replace(nxt, knots_completed=state.knots_completed + 1,
                          thread_remaining=max(0.0, state.thread_remaining - cfg.consumption))
        return nxt, [Hold("left"), Hold("right")]

    elapsed = state.phase_elapsed + sensors.dt
    if force_guarded and elapsed > cfg.timeout:
        raise StallError(ph, elapsed)
    return replace(state, phase_elapsed=elapsed), []


# -- keyframe recordings ------------------------------------------------------------

def _parse_keyframes(data) -> list[Keyframe]:
    try:
        records = data["keyframes"]
    except (TypeError, KeyError) as exc:
        raise KeyframeFormatError("recording has no 'keyframes' list") from exc
    if not records:
        raise KeyframeFormatError("recording is empty")
    phases = {p.value for p in KnotPhase}
    out = []
    for i, rec in enumerate(records):
        try:
            phase = rec["phase"]
            pose = Pose.from_list(rec["pose"])
        except (TypeError, KeyError, ValueError) as exc:
            raise KeyframeFormatError(f"record {i} is malformed") from exc
        if phase not in phases:
            raise KeyframeFormatError(f"record {i}: unknown phase {phase!r}")
        if not pose.is_valid(1e-6):
            raise KeyframeFormatError(f"record {i}: pose is not a rigid transform")
        out.append(Keyframe(phase, pose))
    return out


def load_keyframes(recording) -> list[Keyframe]:
    """Read a keyframe recording from a path, a JSON string, or a parsed dict."""
    if isinstance(recording, dict):
        return _parse_keyframes(recording)
    if isinstance(recording, Path) or (isinstance(recording, str)
                                       and not recording.lstrip().startswith("{")):
        recording = Path(recording).read_text()
    try:
        data = json.loads(recording)
    except json.JSONDecodeError as exc:
        raise KeyframeFormatError(f"recording is not valid JSON: {exc}") from exc
    return _parse_keyframes(data)


def dump_keyframes(keyframes) -> str:
    """JSON text with one keyframe record per line."""
    records = ",\n  ".join(json.dumps({"phase": k.phase, "pose": k.pose.to_list()})
                            for k in keyframes)
    return '{\n "frame": "lTr",\n "keyframes": [\n  ' + records + "\n ]\n}\n"


def save_keyframes(path, keyframes) -> None:
    Path(path).write_text(dump_keyframes(keyframes))


def load_default_keyframes() -> list[Keyframe]:
    text = resources.files("stentsew").joinpath("data/default_keyframes.json").read_text()
    return load_keyframes(text)
