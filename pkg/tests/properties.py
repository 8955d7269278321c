"""Property bodies and strategies shared by the property and acceptance suites.

Each ``prop_*`` function takes drawn values and asserts; ``PROPERTIES`` maps a
name to (property, strategies) so callers can choose the example budget.
"""

import math

import numpy as np
from hypothesis import strategies as st

from stentsew.camera import CameraIntrinsics, backproject, denormalize, normalize, project
from stentsew.geometry import Pose, quat_to_matrix, rotation_angle, slerp_rotation, velocity_twist
from stentsew.knot import ForceReading, KnotConfig, KnotPhase, KnotState, Sensors, advance

unit = st.floats(-1.0, 1.0, allow_nan=False)
quats = st.tuples(unit, unit, unit, unit).filter(lambda q: sum(c * c for c in q) > 0.01)
vec3 = st.tuples(unit, unit, unit)
poses = st.builds(lambda q, t: Pose(quat_to_matrix(q), t), quats, vec3)
K = CameraIntrinsics()


def _close(A: Pose, B: Pose, tol=1e-9) -> bool:
    return np.allclose(A.matrix(), B.matrix(), atol=tol)


def prop_pose_group(A, B, C):
    I = Pose.identity()
    assert _close((A @ B) @ C, A @ (B @ C))
    assert _close(A @ I, A) and _close(I @ A, A)
    assert _close(A @ A.inverse(), I) and _close(A.inverse() @ A, I)
    assert _close((A @ B).inverse(), B.inverse() @ A.inverse())
    assert (A @ B).is_valid(1e-9)


def prop_twist_homomorphism(A, B):
    assert np.allclose(velocity_twist(A @ B), velocity_twist(A) @ velocity_twist(B), atol=1e-9)
    assert np.allclose(velocity_twist(A.inverse()) @ velocity_twist(A), np.eye(6), atol=1e-9)


def prop_projection_round_trip(x, y, z):
    X = np.array([x * z, y * z, z])
    m = project(X, K)
    assert np.allclose(backproject(m, z, K), X, rtol=1e-12, atol=1e-12)
    assert np.allclose(denormalize(normalize(m, K), K), m, atol=1e-9)


def prop_slerp_linear_in_angle(q0, q1, t):
    R0, R1 = quat_to_matrix(q0), quat_to_matrix(q1)
    total = rotation_angle(R0.T @ R1)
    Rt = slerp_rotation(R0, R1, t)
    assert math.isclose(rotation_angle(R0.T @ Rt), t * total, abs_tol=1e-6)
    assert math.isclose(rotation_angle(Rt.T @ R1), (1 - t) * total, abs_tol=1e-6)


ORDER = list(KnotPhase)
CFG = KnotConfig()
ticks = st.lists(st.tuples(st.floats(0.0, 4.0), st.booleans(), st.booleans()),
                 min_size=1, max_size=60)


def prop_phase_order(events):
    """Phases only ever advance to the next one in the cycle; knots count full cycles."""
    s = KnotState(thread_remaining=1.0)
    for f, done_switch, reached in events:
        sensors = Sensors(ForceReading.from_vector([0.0, f, 0.0]), done_switch, reached, 0.1)
        prev = s
        s, _ = advance(s, sensors, CFG)
        if s.phase is not prev.phase:
            assert s.phase is prev.phase.next()
            assert s.phase_elapsed == 0.0
        completed = prev.phase is KnotPhase.RE_SECURE and s.phase is KnotPhase.SECURE_PULL
        assert s.knots_completed == prev.knots_completed + int(completed)
        assert s.thread_remaining <= prev.thread_remaining


PROPERTIES = {
    "pose_group_axioms": (prop_pose_group, (poses, poses, poses)),
    "velocity_twist_homomorphism": (prop_twist_homomorphism, (poses, poses)),
    "projection_round_trip": (prop_projection_round_trip,
                              (st.floats(-0.5, 0.5), st.floats(-0.4, 0.4),
                               st.floats(0.05, 5.0))),
    "slerp_linear_in_angle": (prop_slerp_linear_in_angle,
                              (quats, quats, st.floats(0.0, 1.0))),
    "state_machine_phase_order": (prop_phase_order, (ticks,)),
}


# -- plain seeded samplers for large randomized batches ---------------------------------

def _quat(rng):
    while True:
        q = rng.uniform(-1.0, 1.0, 4)
        if q @ q > 0.01:
            return tuple(q)


def _pose(rng):
    return Pose(quat_to_matrix(_quat(rng)), rng.uniform(-1.0, 1.0, 3))


def _ticks(rng):
    n = int(rng.integers(1, 61))
    return [(float(rng.uniform(0.0, 4.0)), bool(rng.integers(2)), bool(rng.integers(2)))
            for _ in range(n)]


SAMPLERS = {
    "pose_group_axioms": lambda rng: (_pose(rng), _pose(rng), _pose(rng)),
    "velocity_twist_homomorphism": lambda rng: (_pose(rng), _pose(rng)),
    "projection_round_trip": lambda rng: (rng.uniform(-0.5, 0.5), rng.uniform(-0.4, 0.4),
                                          rng.uniform(0.05, 5.0)),
    "slerp_linear_in_angle": lambda rng: (_quat(rng), _quat(rng), rng.uniform(0.0, 1.0)),
    "state_machine_phase_order": lambda rng: (_ticks(rng),),
}
