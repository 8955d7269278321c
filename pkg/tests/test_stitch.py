import math
import warnings

import numpy as np
import pytest

from stentsew.camera import PointCloud
from stentsew.geometry import Pose, pose_distance, rot_x, rotation_angle
from stentsew.stitch import (ARC, CHORD, PHASE_ORDER, Approach, DegenerateNeighbourhoodError,
                             NeedleSpec, PlanningError, PullOut, Reorient, StitchTooLargeError,
                             chord_length, entry_pose, estimate_normal, fit_local_plane,
                             needle_center, needle_point, pierce_depth, plan_stitch,
                             pullout_trajectory, reorientation_sequence, sewing_frame,
                             stitch_angle)

R = 4e-3
ALPHA = math.radians(30)


def plane_cloud(normal, point, n=40, half=0.01, noise=0.0, seed=0):
    """Regular grid of points on a plane, optionally perturbed along the normal."""
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    a = np.array([1.0, 0, 0]) if abs(normal[0]) < 0.9 else np.array([0, 1.0, 0])
    u = np.cross(normal, a)
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    g = np.linspace(-half, half, n)
    uu, vv = np.meshgrid(g, g)
    pts = np.asarray(point) + uu.reshape(-1, 1) * u + vv.reshape(-1, 1) * v
    if noise:
        pts = pts + np.random.default_rng(seed).normal(0, noise, (len(pts), 1)) * normal
    return PointCloud(pts, np.ones(len(pts), bool))


@pytest.fixture
def flat():
    """Fabric facing the camera at 0.3 m, normal toward the origin."""
    return plane_cloud([0, 0, -1.0], [0, 0, 0.3])


def bisect(f, lo, hi, it=200):
    for _ in range(it):
        mid = 0.5 * (lo + hi)
        if (f(lo) < 0) == (f(mid) < 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class TestPlaneFit:
    def test_exact_plane(self):
        n = np.array([0.2, -0.3, -1.0])
        cloud = plane_cloud(n, [0.01, 0.02, 0.3])
        c, est = fit_local_plane(cloud, [0.01, 0.02, 0.3])
        assert np.allclose(est, n / np.linalg.norm(n))
        assert np.dot(est, -c) > 0        # faces the camera origin

    def test_matches_least_squares_oracle(self):
        rng = np.random.default_rng(4)
        x, y = rng.uniform(-4e-3, 4e-3, (2, 200))
        z = 0.3 + 0.1 * x - 0.2 * y + rng.normal(0, 2e-4, 200)
        pts = np.c_[x, y, z]
        _, est = fit_local_plane(PointCloud(pts, np.ones(200, bool)), [0, 0, 0.3], radius=0.01)
        A = np.c_[x, y, np.ones_like(x)]
        a, b, _ = np.linalg.solve(A.T @ A, A.T @ z)
        oracle = np.array([a, b, -1.0]) / np.linalg.norm([a, b, -1.0])
        # total vs ordinary least squares differ only at second order for a near-flat patch
        assert math.degrees(math.acos(min(1.0, abs(np.dot(est, oracle))))) < 0.2

    def test_cylinder_normal_is_radial(self):
        r = 11e-3
        th = np.linspace(-0.6, 0.6, 60)
        xs = np.linspace(-5e-3, 5e-3, 30)
        T, X = np.meshgrid(th, xs)
        pts = np.c_[X.ravel(), r * np.sin(T.ravel()), 0.3 - r * np.cos(T.ravel())]
        cloud = PointCloud(pts, np.ones(len(pts), bool))
        n = estimate_normal(cloud, [0, 0, 0.3 - r], radius=3e-3)
        assert np.allclose(n, [0, 0, -1], atol=1e-9)
        p = np.array([0, r * math.sin(0.3), 0.3 - r * math.cos(0.3)])
        n = estimate_normal(cloud, p, radius=3e-3)
        radial = np.array([0, math.sin(0.3), -math.cos(0.3)])
        assert math.degrees(math.acos(np.dot(n, radial))) < 1.0

    def test_too_few_neighbours(self, flat):
        with pytest.raises(DegenerateNeighbourhoodError):
            fit_local_plane(flat, [0.5, 0.5, 0.3])

    def test_collinear_neighbourhood(self):
        pts = np.c_[np.linspace(-1e-3, 1e-3, 20), np.zeros(20), np.full(20, 0.3)]
        with pytest.raises(DegenerateNeighbourhoodError):
            fit_local_plane(PointCloud(pts, np.ones(20, bool)), [0, 0, 0.3])

    def test_ignores_invalid_points(self, flat):
        pts = flat.points.copy()
        mask = flat.mask.copy()
        pts[:50] = np.nan
        mask[:50] = False
        _, n = fit_local_plane(PointCloud(pts, mask), [0, 0, 0.3])
        assert np.allclose(n, [0, 0, -1])


class TestFrames:
    def test_sewing_frame_right_handed(self):
        f = sewing_frame([0, 0, 0.3], [0.01, 0.002, 0.3], [0, 0, -1.0])
        M = np.column_stack([f.x, f.y, f.z])
        assert np.allclose(M.T @ M, np.eye(3))
        assert np.linalg.det(M) == pytest.approx(1.0)
        assert np.allclose(f.y, np.cross(f.z, f.x))
        assert np.allclose(f.x, np.array([0.01, 0.002, 0]) / np.hypot(0.01, 0.002))

    def test_sewing_frame_projects_direction(self):
        f = sewing_frame([0, 0, 0], [1.0, 0, 1.0], [0, 0, 1.0])
        assert np.allclose(f.x, [1, 0, 0])

    @pytest.mark.parametrize("nxt,normal", [([0, 0, 0], [0, 0, 1.0]), ([0, 0, 1.0], [0, 0, 1.0])])
    def test_sewing_frame_degenerate(self, nxt, normal):
        with pytest.raises(PlanningError):
            sewing_frame([0, 0, 0], nxt, normal)

    def test_entry_pose(self):
        f = sewing_frame([0, 0, 0.3], [0.01, 0, 0.3], [0, 0, -1.0])
        E = entry_pose(f, ALPHA, 3e-3)
        assert np.allclose(E.translation, f.origin + 1.5e-3 * f.y)
        assert np.allclose(E.rotation, f.pose().rotation @ rot_x(ALPHA))

    @pytest.mark.parametrize("alpha", [-0.1, math.pi / 2])
    def test_entry_pose_rejects_tilt(self, alpha):
        f = sewing_frame([0, 0, 0.3], [0.01, 0, 0.3], [0, 0, -1.0])
        with pytest.raises(ValueError):
            entry_pose(f, alpha, 3e-3)


class TestNeedleGeometry:
    def test_pierce_depth(self):
        assert pierce_depth(math.pi / 2, R) == pytest.approx(math.pi / 2 * R)
        with pytest.raises(ValueError):
            pierce_depth(0.0, R)

    @pytest.mark.parametrize("d", [1e-3, 2e-3, 3e-3, 4e-3, 5e-3])
    def test_chord_angle_against_bisection(self, d):
        oracle = bisect(lambda th: 2 * R * math.sin(th / 2) - d, 0.0, math.pi)
        assert stitch_angle(d, R, CHORD) == pytest.approx(oracle, abs=1e-12)
        assert chord_length(stitch_angle(d, R, CHORD), R) == pytest.approx(d)

    def test_arc_angle(self):
        assert stitch_angle(3e-3, R, ARC) == pytest.approx(0.75)

    def test_angle_errors(self):
        with pytest.raises(StitchTooLargeError):
            stitch_angle(8e-3, R, CHORD)
        with pytest.raises(StitchTooLargeError):
            stitch_angle(13e-3, R, ARC)
        with pytest.raises(ValueError):
            stitch_angle(3e-3, R, "spiral")
        with pytest.raises(ValueError):
            stitch_angle(0.0, R)

    def test_needle_passes_through_tip(self):
        c = needle_center(R, 1.0, ALPHA)
        assert np.linalg.norm(c) == pytest.approx(R)
        assert np.allclose(needle_point(c, 0.0), 0.0)
        for phi in np.linspace(0, math.pi, 7):
            p = needle_point(c, phi)
            assert np.linalg.norm(p - c) == pytest.approx(R)
            assert p[0] == pytest.approx(0.0)

    @pytest.mark.parametrize("d", [2e-3, 3e-3, 4e-3, 5e-3])
    def test_circle_plane_exit_gives_commanded_chord(self, d):
        """After reorientation the needle circle cuts the surface at a chord of length d."""
        theta = stitch_angle(d, R)
        f = sewing_frame([0, 0, 0.3], [0.01, 0, 0.3], [0, 0, -1.0])
        E = entry_pose(f, ALPHA, d)
        final = reorientation_sequence(E, E.translation, ALPHA)[-1]
        c = final @ needle_center(R, theta, ALPHA)
        h = np.dot(c - f.origin, f.z)
        assert h == pytest.approx(R * math.cos(theta / 2))
        assert 2 * math.sqrt(R * R - h * h) == pytest.approx(d)


class TestReorientation:
    def test_sequence(self):
        E = Pose(rot_x(ALPHA), [0.01, 0.02, 0.3])
        seq = reorientation_sequence(E, E.translation, ALPHA, step=math.radians(5))
        assert len(seq) == 12
        for P in seq:
            assert np.allclose(P.translation, E.translation)
        assert np.allclose(seq[-1].rotation, rot_x(-ALPHA))
        angles = [rotation_angle(E.rotation.T @ P.rotation) for P in seq]
        assert np.allclose(np.diff(angles), math.radians(5))

    def test_partial_last_step(self):
        E = Pose.identity()
        seq = reorientation_sequence(E, [0, 0, 0], math.radians(12), step=math.radians(5))
        assert len(seq) == 5
        assert rotation_angle(seq[-1].rotation) == pytest.approx(math.radians(24))

    def test_rotates_about_point(self):
        E = Pose(np.eye(3), [0, 0, 0])
        seq = reorientation_sequence(E, [0, 0.01, 0], 0.2)
        assert np.linalg.norm(seq[-1].translation - [0, 0.01, 0]) == pytest.approx(0.01)

    @pytest.mark.parametrize("alpha,step", [(0.0, 0.1), (0.2, 0.0)])
    def test_rejects(self, alpha, step):
        with pytest.raises(ValueError):
            reorientation_sequence(Pose.identity(), [0, 0, 0], alpha, step)

    def test_pullout(self):
        A, B = Pose.identity(), Pose(rot_x(0.4), [0, 0, 0.03])
        traj = pullout_trajectory(A, B, 10)
        assert len(traj) == 10 and traj[-1] is B
        with pytest.raises(ValueError):
            pullout_trajectory(A, B, 0)


class TestPlan:
    def plan(self, flat, d=3e-3, **kw):
        return plan_stitch([0, 0, 0.3], [0.006, 0, 0.3], flat, NeedleSpec(R), d, ALPHA, **kw)

    def test_phase_order(self, flat):
        p = self.plan(flat)
        assert tuple(type(ph) for ph in p.phases) == PHASE_ORDER
        assert p.phase(Approach).waypoints[-1] is p.entry
        assert p.theta == pytest.approx(stitch_angle(3e-3, R))
        assert p.needle.theta == p.theta

    def test_hover_above_entry(self, flat):
        p = self.plan(flat)
        hover = p.phase(Approach).waypoints[0]
        d, ang = pose_distance(hover, p.entry)
        assert d == pytest.approx(0.01) and ang == pytest.approx(0.0)

    def test_pullout_ends_at_standby(self, flat):
        sb = Pose(rot_x(-ALPHA), [0, 0, 0.25])
        p = self.plan(flat, standby=sb)
        assert p.phase(PullOut).waypoints[-1] is sb
        first = p.phase(PullOut).waypoints[0]
        total = pose_distance(p.phase(Reorient).waypoints[-1], sb)[0]
        assert pose_distance(p.phase(Reorient).waypoints[-1], first)[0] == pytest.approx(total / 10)

    def test_target_snapped_to_fitted_plane(self, flat):
        p = plan_stitch([0, 0, 0.3015], [0.006, 0, 0.3], flat, NeedleSpec(R), 3e-3, ALPHA)
        assert p.frame.origin[2] == pytest.approx(0.3)

    def test_size_limits(self, flat):
        with pytest.raises(StitchTooLargeError):
            self.plan(flat, d=5.5e-3)
        with pytest.raises(PlanningError):
            self.plan(flat, d=0.5e-3)
        with pytest.warns(UserWarning):
            self.plan(flat, d=1.5e-3)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            self.plan(flat, d=2e-3)

    def test_text_export(self, flat):
        p = self.plan(flat)
        lines = p.to_text().splitlines()
        assert lines[0].startswith("# stitch")
        n_wp = sum(len(getattr(ph, "waypoints", [None])) for ph in p.phases)
        assert len(lines) == 1 + n_wp
        row = next(line for line in lines if line.startswith("reorient,0,"))
        assert len(row.split(",")) == 18
