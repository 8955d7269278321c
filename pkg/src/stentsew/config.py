"""JSON configuration: the only place millimetres and degrees appear.

Every key is optional. Unit suffixes in key names (``_mm``, ``_deg``, ``_s``...)
are converted to SI on load. 4x4 pose matrices are row-major, in metres.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics
from .geometry import Pose
from .knot import KnotConfig, TensionConfig
from .servo import ServoConfig
from .sim import CylinderFabric, PlaneFabric, WorldConfig, default_pattern
from .stitch import CHORD

CONFIG_ENV = "STENTSEW_CONFIG"

MM = 1e-3


@dataclass(frozen=True)
class StitchSettings:
    radius: float = 4e-3
    alpha: float = math.radians(30.0)
    mode: str = CHORD
    target_spacing: float = 6e-3
    standby_offset: float = 25e-3
    hover: float = 10e-3
    reorient_step: float = math.radians(5.0)
    normal_radius: float = 5e-3
    pullout_steps: int = 10
    hover_epsilon: float = 1e-2


@dataclass(frozen=True)
class KnotSettings:
    controller: KnotConfig = field(default_factory=KnotConfig)
    thread_length: float = 0.25
    stiffness: float = 100.0
    force_dt: float = 0.01
    slack: float = 5e-3
    stitch_size: float = 3e-3
    target_spacing: float = 4e-3
    settle_time: float = 2.0
    tension_band: float = 0.05


@dataclass(frozen=True)
class Settings:
    world: WorldConfig = field(default_factory=WorldConfig)
    mandrel: CylinderFabric = field(default_factory=lambda: CylinderFabric(
        [0.0, 0.0, 0.30], [1.0, 0.0, 0.0], 22e-3, 0.12))
    servo: ServoConfig = field(default_factory=ServoConfig)
    stitch: StitchSettings = field(default_factory=StitchSettings)
    knot: KnotSettings = field(default_factory=KnotSettings)


def _pose(values) -> Pose:
    return Pose.from_list(values)


def _fabric(d: dict):
    kind = d.get("type", "plane")
    if kind == "plane":
        return PlaneFabric(np.asarray(d.get("point_mm", [0, 0, 320]), float) * MM,
                           d.get("normal", [0.0, math.sin(math.radians(15)),
                                            math.cos(math.radians(15))]),
                           d.get("half_size_mm", 60.0) * MM)
    if kind == "cylinder":
        return CylinderFabric(np.asarray(d.get("axis_point_mm", [0, 0, 300]), float) * MM,
                              d.get("axis_dir", [1.0, 0.0, 0.0]),
                              d.get("diameter_mm", 22.0) * MM,
                              d.get("length_mm", 120.0) * MM)
    raise ValueError(f"unknown fabric type {kind!r}")


def settings_from_dict(d: dict) -> Settings:
    s = Settings()
    w = s.world
    if "camera" in d:
        w = replace(w, intrinsics=CameraIntrinsics(**d["camera"]))
    if "bTc" in d.get("extrinsics", {}):
        w = replace(w, bTc=_pose(d["extrinsics"]["bTc"]))
    if "fabric" in d:
        w = replace(w, fabric=_fabric(d["fabric"]))
    pat = d.get("pattern", {})
    if "dots_mm" in pat:
        w = replace(w, pattern=np.asarray(pat["dots_mm"], float).reshape(-1, 3) * MM)
    for key in ("tTp", "eTt", "lTh"):
        if key in pat:
            w = replace(w, **{key: _pose(pat[key])})
    noise = d.get("noise", {})
    w = replace(w,
                pixel_sigma=noise.get("pixel_sigma_px", w.pixel_sigma),
                depth_sigma=noise.get("depth_sigma_mm", w.depth_sigma / MM) * MM,
                dropout=noise.get("dropout", w.dropout),
                dt=d.get("dt_s", w.dt),
                jaw_press_bias=d.get("jaw_press_bias_mm", w.jaw_press_bias / MM) * MM,
                seed=d.get("seed", w.seed))
    if "workspace_mm" in d:
        w = replace(w, workspace_lo=np.asarray(d["workspace_mm"]["lo"], float) * MM,
                    workspace_hi=np.asarray(d["workspace_mm"]["hi"], float) * MM)

    nd = d.get("needle", {})
    st = d.get("stitch", {})
    stitch = StitchSettings(
        radius=nd.get("radius_mm", 4.0) * MM,
        alpha=math.radians(nd.get("tilt_deg", 30.0)),
        mode=nd.get("mode", CHORD),
        target_spacing=st.get("target_spacing_mm", 6.0) * MM,
        standby_offset=st.get("standby_offset_mm", 25.0) * MM,
        hover=st.get("hover_mm", 10.0) * MM,
        reorient_step=math.radians(st.get("reorient_step_deg", 5.0)),
        normal_radius=st.get("normal_radius_mm", 5.0) * MM,
        pullout_steps=st.get("pullout_steps", 10),
        hover_epsilon=st.get("hover_epsilon", 1e-2),
    )
    w = replace(w, needle_radius=stitch.radius)

    sv = d.get("servo", {})
    servo = ServoConfig(
        gain=sv.get("gain", 0.5), epsilon=sv.get("epsilon", 1e-4),
        max_linear=sv.get("max_linear_mps", 0.05), max_angular=sv.get("max_angular_radps", 0.5),
        n_min=sv.get("n_min", 4), max_condition=sv.get("max_condition", 1e4),
        max_iterations=sv.get("max_iterations", 200), mount=sv.get("mount", "eye_to_hand"))

    kd = d.get("knot", {})
    tension = TensionConfig(
        setpoint=kd.get("setpoint_N", 0.7), secure_threshold=kd.get("secure_threshold_N", 2.0),
        kp=kd.get("kp", 0.05), max_speed=kd.get("max_speed_mps", 0.02),
        **({"feed_direction": kd["feed_direction"]} if "feed_direction" in kd else {}))
    ctrl = replace(KnotConfig(tension=tension),
                   consumption=kd.get("consumption_mm", 17.0) * MM,
                   timeout=kd.get("timeout_s", 10.0))
    knot = KnotSettings(
        controller=ctrl,
        thread_length=kd.get("thread_length_mm", 250.0) * MM,
        stiffness=kd.get("stiffness_Npm", 100.0),
        force_dt=kd.get("force_dt_s", 0.01),
        stitch_size=kd.get("stitch_size_mm", 3.0) * MM,
    )
    mandrel = _fabric({"type": "cylinder", **d["mandrel"]}) if "mandrel" in d else s.mandrel
    return Settings(w, mandrel, servo, stitch, knot)


def load_settings(path=None) -> Settings:
    """Load from ``path``, else from $STENTSEW_CONFIG, else built-in defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return Settings()
    return settings_from_dict(json.loads(Path(path).read_text()))


def default_pattern_mm() -> list:
    return (default_pattern() / MM).tolist()
