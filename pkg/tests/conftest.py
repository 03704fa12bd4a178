import numpy as np
import pytest

from resrace.config import RunConfig
from resrace.geometry import rect_hits_segments
from resrace.lidar import scan as lidar_scan
from resrace.planners.apf import denormalize_action
from resrace.track import ProgressTracker, Track, make_track, start_positions
from resrace.vehicle import (SLIP, STEER, V, X, Y, YAW, footprint_corners,
                             low_level_control_arrays, step_dynamics_arrays)


def build_oval(straight: float = 25.0, radius: float = 6.0,
               half_width: float = 1.5, spacing: float = 0.5) -> Track:
    """Stadium oval: two straights joined by semicircles, CCW."""
    pts = []
    n_s = int(straight / spacing)
    for i in range(n_s):  # bottom straight, +x
        pts.append((i * spacing, 0.0))
    n_a = int(np.pi * radius / spacing)
    for i in range(n_a):  # right U-turn
        a = -np.pi / 2 + np.pi * i / n_a
        pts.append((straight + radius * np.cos(a), radius + radius * np.sin(a)))
    for i in range(n_s):  # top straight, -x
        pts.append((straight - i * spacing, 2 * radius))
    for i in range(n_a):  # left U-turn
        a = np.pi / 2 + np.pi * i / n_a
        pts.append((radius * np.cos(a), radius + radius * np.sin(a)))
    pts = np.array(pts)
    return make_track("oval", pts, np.full(len(pts), half_width))


def build_scurve(half_width: float = 1.6, spacing: float = 0.5) -> Track:
    """Closed loop with alternating left/right curvature (chicane shape)."""
    theta = np.linspace(0, 2 * np.pi, 720, endpoint=False)
    r = 12.0 * (1.0 + 0.30 * np.sin(2 * theta) + 0.10 * np.cos(3 * theta))
    pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    seg = np.diff(np.vstack([pts, pts[:1]]), axis=0)
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    n = int(arc[-1] / spacing)
    s = np.linspace(0, arc[-1], n, endpoint=False)
    resampled = np.stack([
        np.interp(s, arc, np.concatenate([pts[:, 0], pts[:1, 0]])),
        np.interp(s, arc, np.concatenate([pts[:, 1], pts[:1, 1]])),
    ], axis=1)
    return make_track("scurve", resampled, np.full(len(resampled), half_width))


@pytest.fixture(scope="session")
def oval_track() -> Track:
    return build_oval()


@pytest.fixture(scope="session")
def scurve_track() -> Track:
    return build_scurve()


def drive_solo(track: Track, planner, cfg: RunConfig, n_laps: int,
               seed: int = 0):
    """Close the loop around a planner alone on a track.

    Returns (laps_done, wall_contacts, control_steps); stops at the first
    wall contact or once n_laps of arc progress are complete.
    """
    veh, lidar_cfg = cfg.vehicle, cfg.lidar
    rng = np.random.default_rng(seed)
    walls = track.wall_segments()
    x0, y0, yaw0, _ = start_positions(track, cfg.env.n_start_positions)[0]
    S = np.array([[x0, y0, 0.0, 3.0, yaw0, 0.0, 0.0]])
    tracker = ProgressTracker(track, (x0, y0))
    start_progress = tracker.progress
    max_steps = int(n_laps * track.total_length / 1.0 / cfg.env.dt_control) * 2
    for step in range(max_steps):
        pose = (S[0, X], S[0, Y], S[0, YAW])
        sc = lidar_scan(walls, [], pose, lidar_cfg.noise_std, rng, lidar_cfg)
        action = planner.act(sc)
        tv, ts = denormalize_action(action, veh)
        for _ in range(2):
            accel, sv = low_level_control_arrays(
                S[:, V] * np.cos(S[:, SLIP]), S[:, STEER],
                np.array([tv]), np.array([ts]), veh)
            S = step_dynamics_arrays(S, accel, sv, veh, veh.dt_physics)
        corners = footprint_corners(S[0, X], S[0, Y], S[0, YAW],
                                    veh.length, veh.width)
        if rect_hits_segments(corners, walls, (S[0, X], S[0, Y]), S[0, YAW],
                              veh.length, veh.width):
            laps = (tracker.progress - start_progress) / track.total_length
            return laps, 1, step + 1
        progress = tracker.update((S[0, X], S[0, Y]))
        if progress - start_progress >= n_laps * track.total_length:
            return n_laps, 0, step + 1
    laps = (tracker.progress - start_progress) / track.total_length
    return laps, 0, max_steps
